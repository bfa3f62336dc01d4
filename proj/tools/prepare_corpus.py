#!/usr/bin/env python3
"""Build the line-per-document corpus from Project Gutenberg Shakespeare texts.

The input directory is the ``shksprdata/texts`` folder of the ``shakespeare``
sdist on PyPI (``pip download --no-deps shakespeare==0.6``). Every blank-line
separated paragraph becomes one document; line breaks inside a paragraph are
kept as `` / `` so verse structure stays visible to a byte-level model.
"""
import argparse
import pathlib

VALIDATION_PLAYS = {"hamlet_gut.txt", "tempest_gut.txt", "sonnets_gut.txt"}


def paragraphs(text):
    for block in text.replace("\r\n", "\n").split("\n\n"):
        lines = [ln.strip() for ln in block.split("\n") if ln.strip()]
        if lines:
            yield " / ".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("texts", type=pathlib.Path)
    ap.add_argument("out", type=pathlib.Path)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    train, val = [], []
    for path in sorted(args.texts.glob("*_gut.txt")):
        docs = list(paragraphs(path.read_text(encoding="latin-1")))
        (val if path.name in VALIDATION_PLAYS else train).extend(docs)
    for name, docs in (("train.txt", train), ("val.txt", val)):
        (args.out / name).write_text("\n".join(docs) + "\n", encoding="latin-1")
        print(name, len(docs), "documents")


if __name__ == "__main__":
    main()
