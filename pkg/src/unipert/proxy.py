"""Held-out-encoder transfer proxy.

For each (target, source split, encoder) the report row holds the mean
cosine between perturbed-source global features and the target's global
feature, the unperturbed baseline, and the improvement. The target view is
the full target image, identical across configurations so ablation arms
stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import cosine

REPORT_COLUMNS = ("target_id", "split", "encoder", "mean_sim", "baseline_sim", "delta")


@dataclass(frozen=True)
class ProxyRow:
    target_id: int
    split: str
    encoder: str
    mean_sim: float
    baseline_sim: float
    delta: float

    def as_list(self):
        return [self.target_id, self.split, self.encoder,
                self.mean_sim, self.baseline_sim, self.delta]


def proxy_eval(delta, target, target_id: int, splits: dict, encoders: dict) -> list:
    """Rows for one perturbation.

    splits: name -> list of source images (seen must hold exactly the
    optimization sources; unseen must be disjoint). encoders: label ->
    encoder, train encoders plus the held-out one.
    """
    rows = []
    for enc_label, enc in encoders.items():
        tgt_glob = enc.forward(target).global_feat
        for split_name, images in splits.items():
            sims = []
            bases = []
            for img in images:
                sims.append(cosine(enc.forward(img + delta).global_feat, tgt_glob))
                bases.append(cosine(enc.forward(img).global_feat, tgt_glob))
            mean_sim = float(np.mean(sims))
            baseline = float(np.mean(bases))
            rows.append(ProxyRow(
                target_id=target_id,
                split=split_name,
                encoder=enc_label,
                mean_sim=mean_sim,
                baseline_sim=baseline,
                delta=mean_sim - baseline,
            ))
    return rows


def mean_delta(rows, *, split: str, encoder: str) -> float:
    """Mean improvement over targets for one (split, encoder) cell."""
    vals = [r.delta for r in rows if r.split == split and r.encoder == encoder]
    if not vals:
        raise ValueError(f"no rows for split={split!r} encoder={encoder!r}")
    return float(np.mean(vals))
