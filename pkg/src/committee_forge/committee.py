"""Committees: (preprocessor, network) pairs combined by averaging outputs.

Each member owns a width spec; at test time the input digit is normalized
per member and run through that member's net, and the committee's score
vector is the plain arithmetic mean of the members' softmax outputs.  No
weighting, no stacking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .mnist_io import Dataset, Image
from .network import Network, EvalResult, evaluate_scores, forward, forward_batch, load_checkpoint
from .normalize import WidthSpec, normalize_dataset, width_normalize

MANIFEST_HEADER = "# committee-forge manifest v1"


@dataclass
class Member:
    spec: WidthSpec
    net: Network
    provenance: dict = dc_field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.provenance.get("name", self.spec.name)


@dataclass
class Committee:
    members: list[Member]

    def __post_init__(self):
        if not self.members:
            raise ValueError("committee must have at least one member")
        out_sizes = {m.net.layer_sizes[-1] for m in self.members}
        if len(out_sizes) != 1:
            raise ValueError(f"members disagree on output size: {sorted(out_sizes)}")
        in_sizes = {m.net.layer_sizes[0] for m in self.members}
        if len(in_sizes) != 1:
            raise ValueError(f"members disagree on input size: {sorted(in_sizes)}")

    def __len__(self):
        return len(self.members)


def committee_predict(committee: Committee, raw: Image) -> np.ndarray:
    """Mean of member outputs for one raw image, each member seeing its own
    width-normalized view."""
    outputs = [forward(m.net, width_normalize(raw, m.spec).pixels.reshape(-1))
               for m in committee.members]
    return np.mean(outputs, axis=0)


def member_scores(committee: Committee, test: Dataset) -> np.ndarray:
    """(n_members, n_samples, n_classes) raw member outputs on a test set.

    Normalized views of the test set are computed once per distinct width
    spec, not once per member.
    """
    views: dict[str, Dataset] = {}
    scores = []
    for m in committee.members:
        key = m.spec.name
        if key not in views:
            views[key] = normalize_dataset(test, m.spec)
        view = views[key]
        scores.append(forward_batch(m.net, view.pixels.reshape(len(view), -1)))
    return np.stack(scores)


@dataclass
class CommitteeEval:
    result: EvalResult                  # committee-level evaluation
    member_errors_pct: list[float]
    second_guess_correct: int           # misses whose runner-up class was right

    @property
    def error_pct(self) -> float:
        return self.result.error_pct


def committee_evaluate(committee: Committee, test: Dataset) -> CommitteeEval:
    """Committee error plus per-member errors and the miss report inputs."""
    per_member = member_scores(committee, test)
    member_errs = [evaluate_scores(s, test.labels).error_pct for s in per_member]
    result = evaluate_scores(per_member.mean(axis=0), test.labels)
    second = int(np.sum(result.top2[result.miss_indices, 1]
                        == test.labels[result.miss_indices]))
    return CommitteeEval(result, member_errs, second)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_manifest(committee: Committee, checkpoint_paths: list[str | Path],
                  manifest_path: str | Path) -> Path:
    """Text manifest: one member per line with spec, checkpoint path, checksum.

    Checkpoint paths are stored relative to the manifest's directory when
    possible so the bundle can be moved as a unit.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    lines = [MANIFEST_HEADER]
    for member, ckpt in zip(committee.members, checkpoint_paths):
        ckpt = Path(ckpt)
        try:
            rel = ckpt.relative_to(base)
        except ValueError:
            rel = ckpt
        lines.append("\t".join([member.spec.name, str(rel), _sha256(ckpt)]))
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_committee(manifest_path: str | Path) -> Committee:
    """Rebuild a committee from a manifest, verifying checkpoint checksums."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{manifest_path}: not a committee manifest")
    members = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest_path}:{lineno}: expected 'spec\\tpath\\tsha256'")
        spec_name, rel, digest = parts
        ckpt = base / rel
        if not ckpt.exists():
            raise FileNotFoundError(f"{manifest_path}:{lineno}: missing checkpoint {ckpt}")
        actual = _sha256(ckpt)
        if actual != digest:
            raise ValueError(f"{manifest_path}:{lineno}: checksum mismatch for {ckpt}: "
                             f"recorded {digest[:12]}.., file {actual[:12]}..")
        net, meta = load_checkpoint(ckpt)
        members.append(Member(WidthSpec.parse(spec_name), net, provenance=meta))
    return Committee(members)
