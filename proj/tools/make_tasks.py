#!/usr/bin/env python3
"""Generate the synthetic zero-shot task suite from the validation corpus.

Every task is multiple choice over byte strings, so any checkpoint can be
scored without tokenizer or dataset downloads. Output is JSON Lines, one task
per line, in the format `shrinklm evaluate` reads.
"""
import argparse
import json
import pathlib
import random

MAX_PROMPT = 150


def documents(path):
    for line in path.read_text(encoding="latin-1").splitlines():
        words = line.split()
        if len(words) >= 24:
            yield words


def split_doc(words, rng, n_next):
    cut = rng.randint(8, min(20, len(words) - n_next - 1))
    prompt = " ".join(words[:cut])[-MAX_PROMPT:]
    return prompt + " ", " ".join(words[cut:cut + n_next])


def next_words(docs, rng, n, metric, name, vary_length):
    instances = []
    for _ in range(n):
        doc = rng.choice(docs)
        k = rng.randint(2, 6) if vary_length else 3
        prompt, gold = split_doc(doc, rng, k)
        choices = [gold]
        while len(choices) < 4:
            other = rng.choice(docs)
            start = rng.randrange(0, len(other) - 6)
            cand = " ".join(other[start:start + (rng.randint(2, 6) if vary_length else 3)])
            if cand not in choices:
                choices.append(cand)
        rng.shuffle(choices)
        instances.append({"prompt": prompt, "completions": choices, "gold_index": choices.index(gold)})
    return {"name": name, "metric": metric, "instances": instances}


def verse_continuation(docs, rng, n):
    lines = [ln.strip() for d in docs for ln in " ".join(d).split(" / ") if 12 <= len(ln.strip()) <= 70]
    pairs = []
    for d in docs:
        parts = [p.strip() for p in " ".join(d).split(" / ")]
        pairs += [(a, b) for a, b in zip(parts, parts[1:]) if 12 <= len(a) <= 90 and 12 <= len(b) <= 70]
    instances = []
    for a, b in rng.sample(pairs, n):
        choices = [b] + rng.sample([ln for ln in lines if ln != b], 3)
        rng.shuffle(choices)
        instances.append({"prompt": a + " / ", "completions": choices, "gold_index": choices.index(b)})
    return {"name": "verse_continuation", "metric": "pmi_dc", "domain_premise": " / ", "instances": instances}


def real_or_shuffled(docs, rng, n):
    instances = []
    for i in range(n):
        words = rng.choice(docs)[:12]
        real = i % 2 == 0
        if not real:
            words = words[:]
            rng.shuffle(words)
        instances.append({"prompt": " ".join(words) + " (Sense: ", "completions": ["no", "yes"],
                          "gold_index": 1 if real else 0})
    return {"name": "real_or_shuffled", "metric": "f1", "instances": instances}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus", type=pathlib.Path, default=pathlib.Path("data/corpus/val.txt"))
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/tasks/synthetic.jsonl"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("-n", type=int, default=100)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    docs = list(documents(args.corpus))
    tasks = [
        next_words(docs, rng, args.n, "acc", "next_words", vary_length=False),
        next_words(docs, rng, args.n, "len_norm_acc", "next_words_varlen", vary_length=True),
        verse_continuation(docs, rng, args.n),
        real_or_shuffled(docs, rng, args.n),
    ]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(t, ensure_ascii=False) + "\n")
    for t in tasks:
        print(t["name"], t["metric"], len(t["instances"]))


if __name__ == "__main__":
    main()
