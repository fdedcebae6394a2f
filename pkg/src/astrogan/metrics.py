"""Evaluation: per-channel L1 / RMS distances and Frechet Inception Distance."""

from __future__ import annotations

import enum
import json
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .colorspace import ContractError, ImageGrid, Space, normalize, rgb_to_lab, split_lab
from .datapipe import ColorizationSample, SRSample, reconstruct_rgb
from .models import ModelParams, WeightsError, forward
from .trainer import sample_arrays

FID_EPS = 1e-6
FID_NEG_TOL = 1e-6


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    LAB = "LAB"


class FIDNumericalError(ArithmeticError):
    def __init__(self, eigenvalues: np.ndarray):
        worst = np.sort(eigenvalues)[:5]
        super().__init__(
            f"covariance product not PSD within tolerance; smallest eigenvalues {worst}"
        )
        self.eigenvalues = eigenvalues


class EvaluationError(RuntimeError):
    pass


def _channel_names(img: ImageGrid) -> tuple[str, ...]:
    if img.space in (Space.SRGB_8BIT, Space.SRGB_UNIT):
        return ("R", "G", "B")
    if img.space is Space.GRAY_UNIT:
        return ("Y",)
    return {1: ("L",), 2: ("a", "b"), 3: ("L", "a", "b")}[img.channels]


def _paired_diffs(preds: Sequence[ImageGrid], targets: Sequence[ImageGrid]):
    if len(preds) != len(targets):
        raise ContractError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise ContractError("no images to compare")
    space = preds[0].space
    names = _channel_names(preds[0])
    for p, t in zip(preds, targets):
        if p.space is not space or t.space is not space:
            raise ContractError(
                f"mixed color spaces: {p.space.value}/{t.space.value} vs {space.value}"
            )
        if p.shape != t.shape or p.channels != len(names):
            raise ContractError(f"shape mismatch {p.shape} vs {t.shape}")
    return names, [
        (np.asarray(p.pixels, np.float64) - np.asarray(t.pixels, np.float64)).reshape(-1, len(names))
        for p, t in zip(preds, targets)
    ]


def channel_l1(preds: Sequence[ImageGrid], targets: Sequence[ImageGrid]) -> dict[str, float]:
    """Per-channel mean |pred - target| over all images and pixels."""
    names, diffs = _paired_diffs(preds, targets)
    d = np.concatenate(diffs)
    return {n: float(v) for n, v in zip(names, np.abs(d).mean(axis=0))}


def channel_l2(preds: Sequence[ImageGrid], targets: Sequence[ImageGrid]) -> dict[str, float]:
    """Per-channel root-mean-square difference, in the images' declared units."""
    names, diffs = _paired_diffs(preds, targets)
    d = np.concatenate(diffs)
    return {n: float(v) for n, v in zip(names, np.sqrt((d * d).mean(axis=0)))}


# ---------------------------------------------------------------------------
# FID


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _covariance(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return np.zeros((x.shape[1], x.shape[1]))
    return np.atleast_2d(np.cov(x, rowvar=False))


def fid(features_a, features_b, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ``Tr((S1 S2)^{1/2})`` is evaluated as the trace of the square root of the
    symmetric matrix ``S1^{1/2} S2 S1^{1/2}``, which has the same spectrum.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ContractError(f"feature dims differ: {a.shape} vs {b.shape}")
    d = a.shape[1]
    if min(len(a), len(b)) <= d:
        warnings.warn(
            f"FID with {len(a)}/{len(b)} samples for {d} features; covariance is rank-deficient",
            RuntimeWarning,
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = _covariance(a) + eps * np.eye(d)
    cov_b = _covariance(b) + eps * np.eye(d)
    root_a = _psd_sqrt(cov_a)
    prod = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    if w.min() < -FID_NEG_TOL:
        raise FIDNumericalError(w)
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean
    return float(max(value, 0.0))


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def __call__(self, images: Sequence[ImageGrid]) -> np.ndarray: ...


class PixelExtractor:
    """Identity features: the flattened pixels of a fixed image shape."""

    def __init__(self, shape: tuple[int, int, int]):
        self.shape = tuple(shape)
        self.dim = int(np.prod(self.shape))
        self.name = f"pixels{self.shape}"

    def __call__(self, images: Sequence[ImageGrid]) -> np.ndarray:
        for im in images:
            if im.shape != self.shape:
                raise ContractError(f"expected image shape {self.shape}, got {im.shape}")
        return np.stack([np.asarray(im.pixels, np.float64).reshape(-1) for im in images])


class PoolingExtractor:
    """Average-pool each channel to a ``grid x grid`` map and flatten."""

    def __init__(self, grid: int = 4, channels: int = 3):
        self.grid = grid
        self.channels = channels
        self.dim = grid * grid * channels
        self.name = f"avgpool{grid}x{grid}"

    def __call__(self, images: Sequence[ImageGrid]) -> np.ndarray:
        out = []
        for im in images:
            if im.channels != self.channels:
                raise ContractError(f"expected {self.channels} channels, got {im.channels}")
            t = torch.from_numpy(np.array(im.pixels, np.float64)).permute(2, 0, 1)[None]
            out.append(F.adaptive_avg_pool2d(t, self.grid).reshape(-1).numpy())
        return np.stack(out)


class InceptionExtractor:
    """2048-d pool features of an Inception-v3 network loaded from a weights file.

    Images are rescaled to [0, 1], resized to 299x299 and ImageNet-normalized.
    """

    dim = 2048

    def __init__(self, weights_path: str | os.PathLike, batch_size: int = 16):
        from torchvision.models import inception_v3

        path = Path(weights_path)
        if not path.is_file():
            raise WeightsError(f"inception weights not found: {path}")
        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("AuxLogits.")}
        net.load_state_dict(state)
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self.batch_size = batch_size
        self.name = f"inception_v3:{path.name}"
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def __call__(self, images: Sequence[ImageGrid]) -> np.ndarray:
        feats = []
        for i in range(0, len(images), self.batch_size):
            chunk = [_as_unit_rgb(im) for im in images[i : i + self.batch_size]]
            x = torch.from_numpy(np.stack(chunk)).float().permute(0, 3, 1, 2)
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            with torch.no_grad():
                feats.append(self.net((x - self._mean) / self._std).double().numpy())
        return np.concatenate(feats)


def _as_unit_rgb(im: ImageGrid) -> np.ndarray:
    if im.space is Space.SRGB_8BIT:
        return im.pixels / 255.0
    if im.space is Space.SRGB_UNIT:
        return np.asarray(im.pixels)
    raise ContractError(f"inception features need an sRGB image, got {im.space.value}")


def fid_from_images(
    preds: Sequence[ImageGrid], reals: Sequence[ImageGrid], extractor: FeatureExtractor
) -> float:
    try:
        fa = extractor(preds)
        fb = extractor(reals)
    except Exception as exc:
        raise EvaluationError(f"feature extractor {extractor.name} failed: {exc}") from exc
    return fid(fa, fb)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    per_channel_l1: dict[str, float]
    per_channel_l2: dict[str, float]
    mean_l1: float
    mean_l2: float
    colorspace: ColorSpace
    n_images: int
    fid: float | None = None
    model: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["colorspace"] = ColorSpace(self.colorspace).value
        return d

    def to_text(self) -> str:
        chans = list(self.per_channel_l1)
        head = ["Model", "Color Space"] + [f"L1 {c}" for c in chans] + [f"L2 {c}" for c in chans]
        head += ["L1 mean", "L2 mean", "FID"]
        row = [self.model or "-", ColorSpace(self.colorspace).value]
        row += [f"{self.per_channel_l1[c]:.4f}" for c in chans]
        row += [f"{self.per_channel_l2[c]:.4f}" for c in chans]
        row += [f"{self.mean_l1:.4f}", f"{self.mean_l2:.4f}"]
        row.append("-" if self.fid is None else f"{self.fid:.4f}")
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        fmt = " | ".join("{:<%d}" % w for w in widths)
        return "\n".join([fmt.format(*head), "-+-".join("-" * w for w in widths), fmt.format(*row)]) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        """Write ``<path>`` as JSON and a sibling ``.txt`` table."""
        p = Path(path)
        p.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        p.with_suffix(".txt").write_text(self.to_text())


def make_report(
    preds: Sequence[ImageGrid],
    targets: Sequence[ImageGrid],
    colorspace: ColorSpace,
    fid_value: float | None = None,
    model: str = "",
) -> MetricsReport:
    l1 = channel_l1(preds, targets)
    l2 = channel_l2(preds, targets)
    return MetricsReport(
        per_channel_l1=l1,
        per_channel_l2=l2,
        mean_l1=float(np.mean(list(l1.values()))),
        mean_l2=float(np.mean(list(l2.values()))),
        colorspace=ColorSpace(colorspace),
        n_images=len(preds),
        fid=fid_value,
        model=model,
    )


# ---------------------------------------------------------------------------
# evaluation

Sample = ColorizationSample | SRSample
Predictor = Callable[[Sequence[Sample]], list[ImageGrid]]


def _target(sample: Sample) -> ImageGrid:
    return sample.target_hr if isinstance(sample, SRSample) else sample.target_ab


class ModelPredictor:
    """Runs a generator on samples; outputs share the space of the sample targets."""

    def __init__(self, params: ModelParams, batch_size: int = 8):
        self.params = params
        self.batch_size = batch_size
        self.name = params.spec.kind.value

    def __call__(self, samples: Sequence[Sample]) -> list[ImageGrid]:
        out: list[ImageGrid] = []
        for i in range(0, len(samples), self.batch_size):
            chunk = samples[i : i + self.batch_size]
            x = np.stack([sample_arrays(s)[0] for s in chunk])
            try:
                y = forward(self.params, x)
            except Exception as exc:
                ids = ", ".join(s.id for s in chunk)
                raise EvaluationError(f"inference failed on sample(s) {ids}: {exc}") from exc
            for s, arr in zip(chunk, y.astype(np.float64)):
                space = _target(s).space
                if space is Space.SRGB_UNIT and not isinstance(s, SRSample):
                    arr = (arr + 1.0) / 2.0
                out.append(ImageGrid(arr, space))
        return out


class OracleModel:
    """Stub predictor returning each sample's ground truth."""

    name = "oracle"

    def __call__(self, samples: Sequence[Sample]) -> list[ImageGrid]:
        return [_target(s) for s in samples]


def _render_rgb(sample: Sample, pred: ImageGrid) -> ImageGrid:
    if pred.space is Space.LAB_NORM:
        return reconstruct_rgb(sample.input_l, pred)
    return normalize(pred, Space.SRGB_8BIT)


def _render_lab(sample: Sample, pred: ImageGrid) -> ImageGrid:
    if pred.space is Space.LAB_NORM:
        return pred
    lab = normalize(rgb_to_lab(normalize(pred, Space.SRGB_8BIT)), Space.LAB_NORM)
    # colorization reports chroma only; SR reports all three Lab channels
    return lab if isinstance(sample, SRSample) else split_lab(lab)[1]


def evaluate(
    model: ModelParams | Predictor,
    test_set: Sequence[Sample],
    colorspace: ColorSpace | str = ColorSpace.RGB,
    extractor: FeatureExtractor | None = None,
    batch_size: int = 8,
) -> MetricsReport:
    """Distances (and optionally FID) of a model's predictions on ``test_set``.

    RGB reports compare 8-bit renderings (Lab predictions are merged with the
    input L channel first). Colorization Lab reports compare normalized (a, b).
    FID is always computed on the sRGB renderings.
    """
    if not test_set:
        raise ContractError("test set is empty")
    space = ColorSpace(colorspace.upper() if isinstance(colorspace, str) else colorspace)
    predictor = ModelPredictor(model, batch_size) if isinstance(model, ModelParams) else model
    if isinstance(model, ModelParams):
        kind = model.spec.kind
        if kind.is_discriminator:
            raise ContractError("cannot evaluate a discriminator")
        sr_task = isinstance(test_set[0], SRSample)
        if kind.is_sr != sr_task:
            raise ContractError(f"{kind.value} model does not match the test set task")
    preds = predictor(list(test_set))
    render = _render_rgb if space is ColorSpace.RGB else _render_lab
    pred_imgs = [render(s, p) for s, p in zip(test_set, preds)]
    true_imgs = [render(s, _target(s)) for s in test_set]
    fid_value = None
    if extractor is not None:
        if space is ColorSpace.RGB:
            rgb_pred, rgb_true = pred_imgs, true_imgs
        else:
            rgb_pred = [_render_rgb(s, p) for s, p in zip(test_set, preds)]
            rgb_true = [_render_rgb(s, _target(s)) for s in test_set]
        unit = lambda ims: [normalize(i, Space.SRGB_UNIT) for i in ims]  # noqa: E731
        fid_value = fid_from_images(unit(rgb_pred), unit(rgb_true), extractor)
    name = getattr(predictor, "name", type(predictor).__name__)
    return make_report(pred_imgs, true_imgs, space, fid_value, model=name)
