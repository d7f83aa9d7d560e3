from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class Hypothesis:
    """A decoded token sequence with its score channels kept apart.

    ``ids`` never contains blank, sos or eos. ``combined`` is whatever the
    producing search ranked by; it can be rebuilt from the channels and the
    weights that search used.
    """

    ids: tuple[int, ...]
    am_logp: float = 0.0
    attn_logp: float = 0.0
    lm_logp: float = 0.0
    combined: float = 0.0
    finished: bool = True
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def to_json(self, rank: int, text: str | None = None) -> str:
        return json.dumps({"rank": rank, "ids": list(self.ids), "text": text,
                           "am_logp": self.am_logp, "attn_logp": self.attn_logp,
                           "lm_logp": self.lm_logp, "total": self.combined},
                          ensure_ascii=False)


def rank_key(h: Hypothesis):
    """Sort key: best combined score first, ties by lowest id sequence."""
    return (-h.combined, h.ids)
