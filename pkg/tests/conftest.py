import hashlib
import sys
from pathlib import Path

from coat.scorers import Scorer, TokenLikelihoods
from coat.taskgen import QASample, Split

sys.path.insert(0, str(Path(__file__).parent))

# Outcome lines recorded by the acceptance gate, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class HashScorer(Scorer):
    """Deterministic pseudo-random likelihoods from a (prompt, target) hash.

    Stable across processes and platforms, so tables recorded from it can
    be frozen into lookup fixtures. Optionally records every call.
    """

    def __init__(self, salt: int = 0, record: bool = False):
        self.salt = salt
        self.table: dict[tuple[str, str], list[float]] = {}
        self.record = record

    def _prob(self, prompt: str, target: str, i: int) -> float:
        material = f"{self.salt}|{i}|{target}|{prompt}".encode("utf-8")
        value = int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
        return (value + 1) / (2**64 + 2)

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        tokens = target.split()
        probs = [self._prob(prompt, target, i) for i in range(len(tokens))]
        if self.record:
            self.table[(prompt, target)] = probs
        return TokenLikelihoods.from_probs(tokens, probs)


def make_samples(spec: list[tuple[str, str]], *, split: Split = Split.TRAIN) -> list[QASample]:
    """Compact sample factory: spec rows are (concept, answer)."""
    out = []
    for i, (concept, answer) in enumerate(spec):
        out.append(
            QASample(
                id=f"s{i:03d}",
                question=f"question {i} about {concept}",
                context=f"ctx of item{i}. {i}",
                answer=answer,
                concept=concept,
                split=split,
            )
        )
    return out
