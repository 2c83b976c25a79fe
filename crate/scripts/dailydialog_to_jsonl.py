#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Convert one DailyDialog split directory to protoseq jsonl.

The directory must hold dialogues_text.txt (utterances separated by
``__eou__``) and dialogues_emotion.txt (one emotion code per utterance).
Speakers alternate, starting with "A". Dialogues whose utterance and label
counts disagree are skipped with a warning on stderr.
"""

import argparse
import json
import sys
from pathlib import Path

EMOTIONS = ["no_emotion", "anger", "disgust", "fear", "happiness", "sadness", "surprise"]


def convert(split_dir: Path, prefix: str, out) -> tuple[int, int]:
    texts = (split_dir / "dialogues_text.txt").read_text(encoding="utf-8").splitlines()
    codes = (split_dir / "dialogues_emotion.txt").read_text(encoding="utf-8").splitlines()
    if len(texts) != len(codes):
        sys.exit(f"{split_dir}: {len(texts)} dialogues but {len(codes)} label lines")
    written = skipped = 0
    for i, (line, labels) in enumerate(zip(texts, codes)):
        utterances = [u.strip() for u in line.split("__eou__")]
        if utterances and not utterances[-1]:
            utterances.pop()
        labels = [EMOTIONS[int(c)] for c in labels.split()]
        if len(utterances) != len(labels):
            print(f"{split_dir.name} dialogue {i}: {len(utterances)} utterances, {len(labels)} labels; skipped", file=sys.stderr)
            skipped += 1
            continue
        messages = [
            {"speaker": "AB"[j % 2], "text": text, "label": label}
            for j, (text, label) in enumerate(zip(utterances, labels))
        ]
        out.write(json.dumps({"id": f"{prefix}{i:05d}", "messages": messages}, ensure_ascii=False) + "\n")
        written += 1
    return written, skipped


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("split_dir", type=Path)
    parser.add_argument("output", type=Path)
    parser.add_argument("--prefix", default=None, help="conversation id prefix (default: directory name + '-')")
    args = parser.parse_args()
    prefix = args.prefix if args.prefix is not None else f"{args.split_dir.name}-"
    with args.output.open("w", encoding="utf-8") as out:
        written, skipped = convert(args.split_dir, prefix, out)
    print(f"{args.output}: {written} conversations ({skipped} skipped)", file=sys.stderr)


if __name__ == "__main__":
    main()
