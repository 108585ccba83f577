"""Regenerate src/headscale/sample_corpus.txt: a small synthetic English corpus for CI runs.

The text is produced from a fixed template grammar with a fixed seed, so it
carries no third-party copyright and is byte-identical on every run.
"""

import random
from pathlib import Path

SUBJECTS = ["The old miller", "A young sailor", "The village clerk", "My neighbour", "The river pilot",
            "A travelling tinker", "The schoolmistress", "Our cook", "The harbour master", "A shepherd"]
VERBS = ["walked along", "looked across", "thought about", "wrote a letter about", "sang a song about",
         "carried a basket to", "painted a picture of", "told a long story about", "sold apples near",
         "waited patiently beside"]
OBJECTS = ["the grey stone bridge", "the quiet meadow", "the crowded market", "the lighthouse on the hill",
           "the orchard behind the church", "the frozen pond", "the narrow lane", "the busy harbour",
           "the little bakery", "the long road to town"]
TAILS = ["before the sun went down", "while the rain fell softly", "on a cold winter morning",
         "after the bells had rung", "as the wind rose from the sea", "because nobody else would",
         "without saying a word", "for the third time that week", "just as the clock struck nine",
         "when the fog finally lifted"]
FILLER = ["The grass is green.", "The sky is blue.", "The sun is yellow.", "Here we go.", "There and back again."]


def paragraph(rng: random.Random) -> str:
    out = []
    for _ in range(rng.randint(3, 7)):
        if rng.random() < 0.2:
            out.append(rng.choice(FILLER))
        else:
            out.append(f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)} {rng.choice(TAILS)}.")
    return " ".join(out)


def main(size: int = 300_000, seed: int = 1234) -> None:
    rng = random.Random(seed)
    parts, total = [], 0
    while total < size:
        p = paragraph(rng)
        parts.append(p)
        total += len(p) + 2
    path = Path(__file__).resolve().parent.parent / "src" / "headscale" / "sample_corpus.txt"
    path.write_text("\n\n".join(parts) + "\n", encoding="utf-8")
    print(f"wrote {path} ({path.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
