"""Regenerates the count-faithful split manifests in this directory.

Tokens are placeholders; only the counts carry over from the published
splits.
"""
import random
from pathlib import Path

DATASETS = {
    # name: (states, objects, train (Ys, X), val (Ys, Yu, X), test (Ys, Yu, X))
    "mit-states": (115, 245, (1262, 30338), (300, 300, 10420), (400, 400, 12995)),
    "ut-zappos": (16, 12, (83, 22998), (15, 15, 3214), (18, 18, 2914)),
    "cgqa": (453, 870, (5592, 26920), (1252, 1040, 7280), (888, 923, 5098)),
}


def spread(pairs, total, rng):
    """Every pair gets at least one sample; the rest land at random."""
    counts = {p: 1 for p in pairs}
    for _ in range(total - len(pairs)):
        counts[rng.choice(pairs)] += 1
    return counts


def build(name, ns, no, train, val, test):
    rng = random.Random(name)
    states = [f"st{i:03d}" for i in range(ns)]
    objects = [f"ob{i:03d}" for i in range(no)]
    cover = {(i % ns, i % no) for i in range(max(ns, no))}
    rest = [(s, o) for s in range(ns) for o in range(no) if (s, o) not in cover]
    rng.shuffle(rest)
    train_pairs = sorted(cover | set(rest[: train[0] - len(cover)]))
    rest = rest[train[0] - len(cover):]
    val_unseen, rest = sorted(rest[: val[1]]), rest[val[1]:]
    test_unseen = sorted(rest[: test[1]])
    val_seen = sorted(rng.sample(train_pairs, val[0]))
    test_seen = sorted(rng.sample(train_pairs, test[0]))

    out = Path(__file__).parent / name
    out.mkdir(exist_ok=True)
    fmt = lambda p: f"{states[p[0]]} {objects[p[1]]}"
    (out / "states.txt").write_text("".join(t + "\n" for t in states))
    (out / "objects.txt").write_text("".join(t + "\n" for t in objects))
    for fname, ps in [
        ("train_pairs.txt", train_pairs),
        ("val_seen_pairs.txt", val_seen),
        ("val_unseen_pairs.txt", val_unseen),
        ("test_seen_pairs.txt", test_seen),
        ("test_unseen_pairs.txt", test_unseen),
    ]:
        (out / fname).write_text("".join(fmt(p) + "\n" for p in ps))
    lines = []
    for split, pairs, total in [
        ("train", train_pairs, train[1]),
        ("val", val_seen + val_unseen, val[2]),
        ("test", test_seen + test_unseen, test[2]),
    ]:
        counts = spread(pairs, total, rng)
        for p in pairs:
            for _ in range(counts[p]):
                lines.append(f"{len(lines):06d} {fmt(p)} {split}\n")
    (out / "samples.txt").write_text("".join(lines))


if __name__ == "__main__":
    for name, args in DATASETS.items():
        build(name, *args)
