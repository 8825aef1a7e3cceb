"""Builds data/conversations.jsonl: 50 multi-turn assistant dialogues.

Prompts are assembled from topic phrase pools with a fixed seed, so the
file is reproducible. Lengths are drawn to give a long right tail (one-word
follow-ups up to paragraph-sized requests).
"""

import json
import random
import sys

TOPICS = {
    "gardening": ["tomato seedlings", "raised beds", "compost", "aphids on roses", "watering schedule", "clay soil"],
    "cooking": ["sourdough starter", "a weeknight curry", "knife skills", "meal prep", "cast iron pans", "vegan baking"],
    "python": ["list comprehensions", "virtual environments", "async code", "type hints", "unit tests", "pandas dataframes"],
    "travel": ["a week in Portugal", "train passes in Japan", "packing light", "travel insurance", "jet lag", "budget hostels"],
    "fitness": ["a beginner running plan", "stretching", "protein intake", "knee pain after squats", "rest days", "home workouts"],
    "finance": ["an emergency fund", "index funds", "paying off a credit card", "a monthly budget", "retirement accounts", "inflation"],
    "writing": ["a cover letter", "a short story opening", "passive voice", "a wedding toast", "editing my essay", "a product description"],
    "linux": ["file permissions", "a cron job", "ssh keys", "disk usage", "systemd services", "grep and sed"],
    "history": ["the printing press", "the Silk Road", "the fall of Rome", "the industrial revolution", "ancient Egypt", "the space race"],
    "music": ["learning guitar chords", "music theory basics", "home recording", "a practice routine", "reading sheet music", "ear training"],
}

OPENERS = [
    "Can you help me with {t}?",
    "I want to learn about {t}. Where should I start?",
    "What are the most common mistakes people make with {t}?",
    "Explain {t} to me like I am a complete beginner.",
    "I have been struggling with {t} for a while now and I am not sure what I am doing wrong.",
]

FOLLOWUPS = [
    "Why?",
    "Thanks!",
    "Can you give an example?",
    "What about {t}?",
    "How long does that usually take?",
    "Could you make that shorter?",
    "Is there a cheaper option?",
    "What would you recommend for someone with very little free time?",
    "Can you compare that with {t} and tell me which one is better for a beginner?",
    "Ok, and what should I avoid?",
    "Please summarize everything so far as a short checklist.",
    "That makes sense. How do I know if I am making progress?",
    "Go on.",
    "Could you rewrite that in a friendlier tone?",
]

DETAIL = [
    "For context, I live in a small apartment and do not have much space.",
    "I am on a tight budget this month.",
    "I tried following a video tutorial but it skipped a lot of steps.",
    "My friend said the opposite, so now I am confused.",
    "I only have about thirty minutes a day for this.",
    "I already know the basics but want to go deeper.",
    "The instructions I found online were written for experts and used a lot of jargon I did not understand.",
    "Last time I tried, it went badly and I had to start over from scratch, which was frustrating.",
    "I would like a step by step plan that I can follow over the next few weeks.",
    "Please keep in mind that I am doing this as a hobby, not professionally.",
]


def long_request(rng, topic, item):
    parts = [f"Here is my situation with {item}."]
    parts += rng.sample(DETAIL, k=rng.randint(3, len(DETAIL)))
    parts.append(f"I have read a few articles about {topic} but they contradict each other.")
    parts += rng.sample(DETAIL, k=rng.randint(2, 6))
    parts.append("Can you put together a detailed answer that covers the reasoning, the steps, and what to watch out for?")
    return " ".join(parts)


def prompt(rng, topic, items, turn):
    item = rng.choice(items)
    if turn == 0:
        p = rng.choice(OPENERS).format(t=item)
        if rng.random() < 0.5:
            p += " " + " ".join(rng.sample(DETAIL, k=rng.randint(1, 3)))
        return p
    r = rng.random()
    if r < 0.06:
        return long_request(rng, topic, item)
    p = rng.choice(FOLLOWUPS).format(t=item)
    if r > 0.7:
        p += " " + " ".join(rng.sample(DETAIL, k=rng.randint(1, 2)))
    return p


def main(out):
    rng = random.Random(20241015)
    names = sorted(TOPICS)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for i in range(50):
            topic = names[i % len(names)]
            turns = [prompt(rng, topic, TOPICS[topic], t) for t in range(rng.randint(5, 8))]
            f.write(json.dumps({"id": f"oa-{i + 1:03d}", "topic": topic, "turns": turns}) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/conversations.jsonl")
