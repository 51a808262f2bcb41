"""Token error rate via Levenshtein alignment with S/D/I counts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


@dataclass
class SplitScore:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def ter(self) -> float:
        """Token error rate as a percentage of the reference length."""
        if self.ref_length == 0:
            return 0.0 if self.errors == 0 else 100.0
        return 100.0 * self.errors / self.ref_length

    def add(self, other: "SplitScore") -> None:
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.ref_length += other.ref_length


@dataclass
class EvalReport:
    """Per-split scores plus the decode mode that produced the hypotheses."""

    decode_mode: str = "greedy"
    splits: dict[str, SplitScore] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "decode_mode": self.decode_mode,
            "splits": {
                name: {
                    "substitutions": s.substitutions,
                    "deletions": s.deletions,
                    "insertions": s.insertions,
                    "ref_length": s.ref_length,
                    "ter": s.ter,
                }
                for name, s in sorted(self.splits.items())
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        report = cls(decode_mode=payload["decode_mode"])
        for name, s in payload["splits"].items():
            report.splits[name] = SplitScore(
                substitutions=s["substitutions"], deletions=s["deletions"],
                insertions=s["insertions"], ref_length=s["ref_length"])
        return report


def align_counts(ref: list, hyp: list) -> SplitScore:
    """Levenshtein alignment; ties prefer substitution, then insertion,
    then deletion."""
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            ins = dist[i][j - 1] + 1
            dele = dist[i - 1][j] + 1
            dist[i][j] = min(sub, ins, dele)

    subs = ins_count = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins_count += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return SplitScore(substitutions=subs, deletions=dels, insertions=ins_count, ref_length=n)


def score_utterances(refs: dict[str, list], hyps: dict[str, list]) -> SplitScore:
    """Sum alignment counts over a split; utterance id sets must match."""
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise DataError(
            f"utterance id mismatch: missing from hypotheses {missing[:10]}, "
            f"unexpected {extra[:10]}")
    total = SplitScore()
    for utt_id in sorted(refs):
        total.add(align_counts(refs[utt_id], hyps[utt_id]))
    return total


def read_trans_file(path: str | Path) -> dict[str, list[str]]:
    """Read ``utt_id<TAB>tokens`` lines into a dict of token lists."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"transcript file not found: {path}")
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 1:
            out[parts[0]] = []
        elif len(parts) == 2:
            out[parts[0]] = parts[1].split()
        else:
            raise DataError(f"{path}:{lineno}: expected utt_id<TAB>tokens")
    return out
