"""Vertex importance, pixel saliency back-projection, overlays and top-N reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import IntegrityError, InvalidInputError
from .graph import GridGraph, Image
from .model import LayerTrace, ModelParams, forward, softmax_probs

MODES = ("gradcam", "activation")


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel importance in [0, 1], max-normalised."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or not np.all(np.isfinite(s)) or (s.size and s.min() < 0):
            raise IntegrityError("saliency scores must be a finite, non-negative 2-D array")
        object.__setattr__(self, "scores", s)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass
class ClassificationReport:
    entries: list[tuple[str, float]]
    saliency: SaliencyMap | None = None
    mode: str | None = None

    @property
    def predicted(self) -> str:
        return self.entries[0][0]

    def lines(self) -> list[str]:
        return [f"{name}: {100.0 * p:.2f}%" for name, p in self.entries]

    def text(self) -> str:
        return "\n".join(self.lines())

    def to_dict(self, saliency_file: str | None = None) -> dict:
        return {
            "predicted": self.predicted,
            "mode": self.mode,
            "topN": [{"class": name, "prob": p} for name, p in self.entries],
            "saliency_file": saliency_file,
        }

    def to_json(self, saliency_file: str | None = None) -> str:
        return json.dumps(self.to_dict(saliency_file), indent=2)


def vertex_importance(trace: LayerTrace | None, target_class: int, mode: str = "gradcam") -> list[np.ndarray]:
    """Non-negative vertex scores for every layer output, first layer first.

    ``gradcam`` weights each channel by the vertex-averaged gradient of the
    target logit and keeps the positive part of the weighted sum;
    ``activation`` sums absolute activations over channels. Gradcam needs a
    trace recorded under a :class:`~sargnn.autodiff.Tape` with a bound model,
    and leaves that tape intact.
    """
    if trace is None:
        raise InvalidInputError("vertex_importance needs a recorded trace")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    outputs = trace.outputs()
    if mode == "activation":
        return [np.abs(h.data).sum(axis=1) for h in outputs]

    num_classes = trace.logits.shape[0]
    if not 0 <= target_class < num_classes:
        raise InvalidInputError(f"target class {target_class} outside [0, {num_classes})")
    tape = trace.tape
    if tape is None or not tape.contains(trace.logits):
        raise InvalidInputError("gradcam needs a trace recorded on a gradient tape")
    with tape:
        target = ad.pick(trace.logits, target_class)
    grads = ad.backward(tape, target, wrt=outputs, retain=True)
    # the pick node is only needed for this pass
    tape.nodes.pop()
    scores = []
    for h in outputs:
        g = grads.get(h, np.zeros_like(h.data))
        alpha = g.mean(axis=0)
        scores.append(np.maximum(h.data @ alpha, 0.0))
    return scores


def route_scores(scores: np.ndarray, trace: LayerTrace, layer: int | None = None) -> np.ndarray:
    """Carry layer-``layer`` vertex scores down to input pixels, unnormalised.

    Each coarse vertex hands its score to the winning vertex of every channel
    in its pooling window; collisions keep the larger score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    records = trace.layers
    if layer is None:
        layer = len(records) - 1
    if layer < 0:
        layer += len(records)
    if records and not 0 <= layer < len(records):
        raise InvalidInputError(f"layer {layer} outside [0, {len(records)})")
    chain = records[: layer + 1] if records else []
    expected = chain[-1].pooled_grid.num_vertices if chain else trace.input_graph.num_vertices
    if scores.shape != (expected,):
        raise IntegrityError(f"scores have shape {scores.shape}, layer grid has {expected} vertices")
    for rec in reversed(chain):
        fine, coarse = rec.grid, rec.pooled_grid
        if rec.argmax.shape[0] != coarse.num_vertices or (
            rec.argmax.size and (rec.argmax.min() < 0 or rec.argmax.max() >= fine.num_vertices)
        ):
            raise IntegrityError("pooling provenance does not match the recorded grids")
        routed = np.zeros(fine.num_vertices)
        d = rec.argmax.shape[1]
        np.maximum.at(routed, rec.argmax.reshape(-1), np.repeat(scores, d))
        scores = routed
    grid = trace.input_graph
    out = np.zeros((grid.height, grid.width))
    out[grid.coords[:, 0], grid.coords[:, 1]] = scores
    return out


def backproject_saliency(scores: np.ndarray, trace: LayerTrace, layer: int | None = None) -> SaliencyMap:
    """Max-normalised pixel saliency from the vertex scores of one layer (default: last)."""
    pixels = route_scores(scores, trace, layer)
    if np.any(pixels < 0) or not np.all(np.isfinite(pixels)):
        raise IntegrityError("vertex scores must be finite and non-negative")
    top = pixels.max()
    return SaliencyMap(pixels / top if top > 0 else pixels)


def render_overlay(image: Image, saliency: SaliencyMap, threshold: float = 0.5) -> np.ndarray:
    """RGB uint8 overlay: salient pixels (score > 0 and >= threshold) are tinted red."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError(f"threshold must lie in [0, 1], got {threshold}")
    if (image.height, image.width) != (saliency.height, saliency.width):
        raise InvalidInputError(
            f"image is {image.height}x{image.width} but saliency is {saliency.height}x{saliency.width}"
        )
    base = np.rint(image.values * 255.0)
    s = saliency.scores
    tinted = (s > 0) & (s >= threshold)
    faded = np.rint(base * (1.0 - s))
    rgb = np.repeat(base[..., None], 3, axis=2)
    rgb[tinted, 0] = 255.0
    rgb[tinted, 1] = faded[tinted]
    rgb[tinted, 2] = faded[tinted]
    return rgb.astype(np.uint8)


def build_report(
    probs: Sequence[float],
    class_names: Sequence[str],
    n: int = 4,
    saliency: SaliencyMap | None = None,
    mode: str | None = None,
) -> ClassificationReport:
    """Top-``n`` classes by probability (ties go to the lower class index)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size != len(class_names):
        raise InvalidInputError("need one probability per class name")
    if not 1 <= n <= p.size:
        raise InvalidInputError(f"N must lie in [1, {p.size}], got {n}")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"probabilities must lie in [0, 1] and sum to 1 (sum={p.sum():.8f})")
    order = sorted(range(p.size), key=lambda i: (-p[i], i))
    return ClassificationReport([(class_names[i], float(p[i])) for i in order[:n]], saliency, mode)


@dataclass
class Explanation:
    report: ClassificationReport
    target: int
    layer_maps: list[SaliencyMap]
    trace: LayerTrace


def explain(
    model: ModelParams,
    graph: GridGraph,
    mode: str = "gradcam",
    n: int = 4,
    target: int | None = None,
) -> Explanation:
    """Classify ``graph`` and build saliency maps for every layer.

    The report's saliency is the last layer's map. ``target`` defaults to
    the predicted class.
    """
    bound, _ = model.bind(requires_grad=(mode == "gradcam"))
    with Tape() as tape:
        logits, trace = forward(bound, graph, record=True)
    trace.tape = tape
    probs = softmax_probs(logits)
    if target is None:
        target = int(np.argmax(probs))
    scores = vertex_importance(trace, target, mode)
    if trace.layers:
        maps = [backproject_saliency(s, trace, k) for k, s in enumerate(scores)]
    else:
        maps = [backproject_saliency(scores[0], trace)]
    tape.clear()
    report = build_report(probs, model.class_names, min(n, model.num_classes), maps[-1], mode)
    return Explanation(report, target, maps, trace)
