"""Synthetic planted-RoI visual question answering task.

Each sample is a patch grid carrying a few disjoint rectangular
segments. Every segment encodes a concept and a label in dedicated
feature channels; the prompt asks for one concept and the answer is the
label token planted in that concept's segment. Distractor segments
carry conflicting labels, so the answer is only recoverable by reading
the queried segment's patches.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GenerationError
from .weaklabels import Segment

DATASET_SCHEMA = "attnalign-dataset-1"


@dataclass(frozen=True)
class TokenLayout:
    """Where label / concept / control tokens live in the vocabulary."""

    n_labels: int
    n_concepts: int

    @property
    def label_base(self) -> int:
        return 0

    @property
    def concept_base(self) -> int:
        return self.n_labels

    @property
    def ask_token(self) -> int:
        return self.n_labels + self.n_concepts

    @property
    def tokens_used(self) -> int:
        return self.ask_token + 1

    def concept_token(self, concept: int) -> int:
        return self.concept_base + concept

    def label_token(self, label: int) -> int:
        return self.label_base + label


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 2000
    n_test: int = 500
    grid: int = 8
    d_visual: int = 16
    n_concepts: int = 4
    n_segments: int = 3
    n_labels: int = 4
    seg_side_min: int = 2
    seg_side_max: int = 2
    feature_noise: float = 0.1
    # concept channels dominate so prompt-segment cosine ranks the queried
    # segment first even with label mass and feature noise present
    concept_scale: float = 3.0
    label_scale: float = 1.0
    n_background_segments: int = 3
    seed: int = 0

    def validate(self) -> TokenLayout:
        if self.n_concepts < 2:
            raise GenerationError("need at least 2 concepts")
        if self.n_segments > self.n_concepts:
            raise GenerationError("more segments than concepts")
        if self.n_segments > self.n_labels:
            raise GenerationError("more segments than labels")
        if self.d_visual < self.n_concepts + self.n_labels:
            raise GenerationError(
                f"d_visual={self.d_visual} too small for "
                f"{self.n_concepts} concepts + {self.n_labels} labels"
            )
        worst = self.n_segments * self.seg_side_max ** 2
        if worst >= self.grid * self.grid / 2:
            raise GenerationError(
                f"segments could cover {worst} of {self.grid * self.grid} patches; "
                "must stay under half"
            )
        return TokenLayout(n_labels=self.n_labels, n_concepts=self.n_concepts)


@dataclass(frozen=True)
class PlantedSegment:
    token_indices: tuple[int, ...]
    concept: int
    label: int


@dataclass
class SyntheticSample:
    id: str
    grid: int
    features: np.ndarray               # [N x d_visual]
    segments: tuple[PlantedSegment, ...]
    queried_concept: int
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    roi: tuple[int, ...]

    @property
    def image_id(self) -> str:
        return self.id

    @property
    def prompt_id(self) -> str:
        return "p" + "-".join(str(t) for t in self.prompt)


@dataclass
class DatasetMeta:
    spec: DataSpec
    layout: TokenLayout
    concept_vectors: np.ndarray        # [n_concepts x d_visual] channel signatures

    def to_dict(self) -> dict:
        return {
            "schema": DATASET_SCHEMA,
            "spec": asdict(self.spec),
            "layout": {"n_labels": self.layout.n_labels,
                       "n_concepts": self.layout.n_concepts},
            "concept_vectors": [[float(v) for v in row]
                                for row in self.concept_vectors],
        }

    @staticmethod
    def from_dict(doc: dict) -> "DatasetMeta":
        spec = DataSpec(**doc["spec"])
        return DatasetMeta(spec=spec,
                           layout=TokenLayout(**doc["layout"]),
                           concept_vectors=np.array(doc["concept_vectors"]))


def _place_rectangles(rng: np.random.Generator, spec: DataSpec) -> list[tuple[int, ...]]:
    """Disjoint rectangles as token-index tuples; raises when packing fails."""
    g = spec.grid
    occupied = np.zeros((g, g), dtype=bool)
    rects = []
    for _ in range(spec.n_segments):
        placed = False
        for _attempt in range(200):
            w = int(rng.integers(spec.seg_side_min, spec.seg_side_max + 1))
            h = int(rng.integers(spec.seg_side_min, spec.seg_side_max + 1))
            x0 = int(rng.integers(0, g - w + 1))
            y0 = int(rng.integers(0, g - h + 1))
            if occupied[y0:y0 + h, x0:x0 + w].any():
                continue
            occupied[y0:y0 + h, x0:x0 + w] = True
            rects.append(tuple(y * g + x
                               for y in range(y0, y0 + h)
                               for x in range(x0, x0 + w)))
            placed = True
            break
        if not placed:
            raise GenerationError("could not place disjoint segments")
    return rects


def _make_sample(idx: int, prefix: str, rng: np.random.Generator,
                 spec: DataSpec, layout: TokenLayout) -> SyntheticSample:
    n = spec.grid * spec.grid
    rects = _place_rectangles(rng, spec)
    concepts = rng.permutation(spec.n_concepts)[: spec.n_segments]
    labels = rng.permutation(spec.n_labels)[: spec.n_segments]
    queried_slot = int(rng.integers(0, spec.n_segments))

    features = rng.normal(0.0, spec.feature_noise, size=(n, spec.d_visual))
    segments = []
    for tokens, concept, label in zip(rects, concepts, labels):
        features[list(tokens), int(concept)] += spec.concept_scale
        features[list(tokens), spec.n_concepts + int(label)] += spec.label_scale
        segments.append(PlantedSegment(token_indices=tokens,
                                       concept=int(concept), label=int(label)))

    queried = segments[queried_slot]
    prompt = (layout.ask_token, layout.concept_token(queried.concept))
    answer = (layout.label_token(queried.label),)
    return SyntheticSample(id=f"{prefix}{idx:06d}", grid=spec.grid,
                           features=features, segments=tuple(segments),
                           queried_concept=queried.concept, prompt=prompt,
                           answer=answer, roi=queried.token_indices)


def generate_dataset(spec: DataSpec) -> tuple[list[SyntheticSample],
                                              list[SyntheticSample], DatasetMeta]:
    """Deterministic train/test split plus metadata for backends."""
    layout = spec.validate()
    concept_vectors = np.zeros((spec.n_concepts, spec.d_visual))
    concept_vectors[np.arange(spec.n_concepts), np.arange(spec.n_concepts)] = 1.0

    rng = np.random.default_rng(spec.seed)
    train = [_make_sample(i, "tr", rng, spec, layout) for i in range(spec.n_train)]
    test = [_make_sample(i, "te", rng, spec, layout) for i in range(spec.n_test)]
    meta = DatasetMeta(spec=spec, layout=layout, concept_vectors=concept_vectors)
    return train, test, meta


# ---------------------------------------------------------------------------
# candidate proposal for the weak-label pipeline


class PlantedSegmentProposer:
    """Proposes the planted segments plus deterministic background distractors.

    Background rectangles avoid the planted tokens, mimicking a proposer
    that respects region boundaries; partial overlaps would otherwise
    inherit concept signal from the planted region.
    """

    def __init__(self, n_background: int = 3, seg_side: int = 2):
        self.n_background = n_background
        self.seg_side = seg_side

    def propose_for_sample(self, sample: SyntheticSample) -> list[Segment]:
        out = [Segment(id=f"seg{i}", token_indices=s.token_indices,
                       source="planted")
               for i, s in enumerate(sample.segments)]
        planted = set()
        for s in sample.segments:
            planted.update(s.token_indices)
        # stable across processes, unlike the builtin string hash
        digest = hashlib.sha256(("bg:" + sample.id).encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        g = sample.grid
        placed = 0
        for _ in range(50 * self.n_background):
            if placed >= self.n_background:
                break
            x0 = int(rng.integers(0, g - self.seg_side + 1))
            y0 = int(rng.integers(0, g - self.seg_side + 1))
            tokens = tuple(y * g + x
                           for y in range(y0, y0 + self.seg_side)
                           for x in range(x0, x0 + self.seg_side))
            if planted.intersection(tokens):
                continue
            out.append(Segment(id=f"bg{placed}", token_indices=tokens,
                               source="background"))
            placed += 1
        return out


# ---------------------------------------------------------------------------
# reference classifiers (used to certify the task at generation time)


def roi_oracle_predict(sample: SyntheticSample, layout: TokenLayout) -> int:
    """Reads the RoI directly: argmax of the label channels' mean activation."""
    mean = sample.features[list(sample.roi)].mean(axis=0)
    label = int(np.argmax(mean[layout.n_concepts: layout.n_concepts + layout.n_labels]))
    return layout.label_token(label)


def blind_majority_token(samples: Sequence[SyntheticSample]) -> int:
    """Most frequent answer token; the best RoI-blind constant guess."""
    counts: dict[int, int] = {}
    for s in samples:
        counts[s.answer[0]] = counts.get(s.answer[0], 0) + 1
    return max(sorted(counts), key=lambda t: counts[t])


def classifier_accuracy(samples: Sequence[SyntheticSample], predict) -> float:
    hits = sum(1 for s in samples if predict(s) == s.answer[0])
    return hits / len(samples)


# ---------------------------------------------------------------------------
# file round trips (JSON-lines samples, JSON meta)


def _sample_to_dict(sample: SyntheticSample) -> dict:
    return {
        "id": sample.id,
        "grid": sample.grid,
        "d_visual": sample.features.shape[1],
        "queried_concept": sample.queried_concept,
        "prompt": list(sample.prompt),
        "answer": list(sample.answer),
        "roi": list(sample.roi),
        "segments": [{"tokens": list(s.token_indices), "concept": s.concept,
                      "label": s.label} for s in sample.segments],
        "features_b64": base64.b64encode(
            np.ascontiguousarray(sample.features, dtype=np.float64).tobytes()
        ).decode("ascii"),
    }


def _sample_from_dict(doc: dict) -> SyntheticSample:
    n = doc["grid"] * doc["grid"]
    features = np.frombuffer(base64.b64decode(doc["features_b64"]),
                             dtype=np.float64).reshape(n, doc["d_visual"]).copy()
    segments = tuple(PlantedSegment(token_indices=tuple(s["tokens"]),
                                    concept=s["concept"], label=s["label"])
                     for s in doc["segments"])
    return SyntheticSample(id=doc["id"], grid=doc["grid"], features=features,
                           segments=segments,
                           queried_concept=doc["queried_concept"],
                           prompt=tuple(doc["prompt"]),
                           answer=tuple(doc["answer"]), roi=tuple(doc["roi"]))


def write_samples(path: str | Path, samples: Sequence[SyntheticSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_to_dict(s), sort_keys=True) + "\n")


def read_samples(path: str | Path) -> list[SyntheticSample]:
    with open(path) as fh:
        return [_sample_from_dict(json.loads(line)) for line in fh]


def write_meta(path: str | Path, meta: DatasetMeta) -> None:
    Path(path).write_text(json.dumps(meta.to_dict(), sort_keys=True, indent=1) + "\n")


def read_meta(path: str | Path) -> DatasetMeta:
    return DatasetMeta.from_dict(json.loads(Path(path).read_text()))
