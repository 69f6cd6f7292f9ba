"""Whole-volume segmentation: sliding window, dense single-scale execution, thresholding."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine as E
from .architectures import N_LOCATION, PATCH, Network, _conv_name, _fc1_name
from .errors import ValidationError
from .location import location_matrix
from .patches import SlicePyramid
from .volume import CaseRecord, Volume, normalized_case


@dataclass
class ProbabilityMap:
    """Positive-class probabilities, zero outside the brain mask."""

    volume: Volume
    case_id: str
    checkpoint_id: str = ""

    @property
    def values(self) -> np.ndarray:
        return self.volume.values


def _require_location(network: Network, case: CaseRecord) -> Optional[np.ndarray]:
    if network.spec.injection == "none":
        return None
    if case.location_features is None:
        raise ValidationError(
            f"{case.case_id}: network injects location features ({network.spec.injection}) but the case has none")
    return location_matrix(case)


def segment_sliding_window(network: Network, case: CaseRecord, batch_size: int = 256,
                           normalize: bool = True, checkpoint_id: str = "") -> ProbabilityMap:
    """Classify every brain-mask voxel from its own multi-scale patch."""
    if batch_size < 1:
        raise ValidationError(f"batch size must be at least 1, got {batch_size}")
    loc = _require_location(network, case)
    if normalize:
        case = normalized_case(case)
    brain = case.brain_mask.values == 1
    out = np.zeros(brain.shape, dtype=np.float32)
    scales = network.spec.scales
    for z in range(brain.shape[0]):
        ys, xs = np.nonzero(brain[z])
        if ys.size == 0:
            continue
        pyramid = SlicePyramid(np.stack([case.flair.values[z], case.t1.values[z]]), scales)
        for i in range(0, ys.size, batch_size):
            y, x = ys[i:i + batch_size], xs[i:i + batch_size]
            patches = network.network_input(pyramid.extract(y, x), scales)
            feats = None if loc is None else loc[z, y, x]
            out[z, y, x] = network.predict(patches, feats, batch_size=batch_size)[:, 1]
    return ProbabilityMap(Volume(out, case.voxel_size), case.case_id, checkpoint_id)


class DenseNetwork:
    """Fully convolutional form of a single-stream or late-fusion network.

    The first FC layer becomes a convolution with the spatial extent of the
    last conv map; later FC layers act as 1x1 convolutions, i.e. the same
    affine map applied at every output position. Location channels enter at
    the layer the source network injects them into.

    A stream of scale ``s`` reads its box-mean image with stride ``f = s/32``,
    so it runs as ``f*f`` ordinary dense passes, one per phase sub-image.
    Early fusion mixes strides inside one stream and is not supported.
    """

    def __init__(self, network: Network):
        spec = network.spec
        if spec.fusion == "msef":
            raise ValidationError("dense conversion does not support early fusion (msef); use the sliding window")
        self.spec = spec
        self.network = network
        p = network.p
        flat = spec.flat_length
        side = spec.conv_output_size()
        c_last = spec.conv_stack[-1][0]
        self.streams = []
        for s in range(spec.n_streams):
            conv = [(p(f"{_conv_name(s, l, spec)}.w"), p(f"{_conv_name(s, l, spec)}.b"))
                    for l in range(len(spec.conv_stack))]
            w1 = p(f"{_fc1_name(s, spec)}.w")
            # flatten order is (y, x, c), so this reshape lines columns up with im2col rows
            kernel = w1[:, :flat].reshape(w1.shape[0], side, side, c_last).transpose(0, 3, 1, 2)
            self.streams.append((conv, E.weight_matrix(kernel), p(f"{_fc1_name(s, spec)}.b")))
        self.fc1_loc = p("fc1.w")[:, flat:] if spec.injection == "lcl" else None
        self.side = side

    def _fc1_windows(self, stream: int, image: np.ndarray, row_chunk: int) -> np.ndarray:
        """Pre-activation fc1 for every full 32x32 window of ``image`` -> ``(oh, ow, w1)``."""
        conv, matrix, bias = self.streams[stream]
        feat = E.to_nhwc(image[None].astype(self.network.dtype))
        for wt, b in conv:
            feat, _ = E.conv_forward_nhwc(feat, wt, b)
            feat = E.relu(feat)
        oh, ow = feat.shape[1] - self.side + 1, feat.shape[2] - self.side + 1
        # fc1 over the last-conv windows, a few output rows at a time to bound memory
        rows = []
        for r0 in range(0, oh, row_chunk):
            block = feat[:, r0:min(r0 + row_chunk, oh) + self.side - 1]
            rows.append(E.row_matmul(E.im2col(block, self.side), matrix.T))
        return (np.concatenate(rows) + bias).reshape(oh, ow, -1)

    def _strided_fc1(self, stream: int, image: np.ndarray, f: int, oh: int, ow: int,
                     row_chunk: int) -> np.ndarray:
        """fc1 for windows sampling ``image`` with stride ``f``; window ``(i, j)`` starts at ``(i, j)``."""
        out = None
        for a in range(f):
            for b in range(f):
                need_h, need_w = len(range(a, oh, f)), len(range(b, ow, f))
                if need_h == 0 or need_w == 0:
                    continue
                part = self._fc1_windows(stream, image[:, a::f, b::f], row_chunk)[:need_h, :need_w]
                if out is None:
                    out = np.empty((oh, ow, part.shape[2]), dtype=part.dtype)
                out[a::f, b::f] = part
        return out

    def _head(self, z1: list, loc: Optional[np.ndarray], shape) -> np.ndarray:
        spec = self.spec
        p = self.network.p
        alpha_loc = None if loc is None else (spec.alpha * loc.reshape(-1, N_LOCATION)).astype(z1[0].dtype)
        z1 = [z.reshape(-1, z.shape[-1]) for z in z1]
        if spec.injection == "lcl":
            z1[0] = z1[0] + alpha_loc @ self.fc1_loc.T
        h1 = np.concatenate([E.relu(z) for z in z1], axis=1)
        if spec.injection == "ffcl":
            h1 = np.concatenate([h1, alpha_loc], axis=1)
        h2 = E.relu(E.fully_connected(h1, p("fc2.w"), p("fc2.b")))
        if spec.injection == "sfcl":
            h2 = np.concatenate([h2, alpha_loc], axis=1)
        logits = E.fully_connected(h2, p("fc3.w"), p("fc3.b"))
        return E.softmax(logits)[:, 1].reshape(shape)

    def slice_probabilities(self, channels: np.ndarray, loc: Optional[np.ndarray] = None,
                            row_chunk: int = 8) -> np.ndarray:
        """Probabilities for every pixel of a ``(C, H, W)`` slice; ``loc`` is ``(H, W, 8)``."""
        spec = self.spec
        c, h, w = channels.shape
        if c != spec.channels_per_scale:
            raise ValidationError(f"slice has {c} channels, network expects {spec.channels_per_scale}")
        if spec.injection != "none" and (loc is None or loc.shape != (h, w, N_LOCATION)):
            raise ValidationError(f"location features of shape ({h}, {w}, {N_LOCATION}) required")
        # the same padded box-mean images the sliding window samples from
        pyramid = SlicePyramid(channels, spec.scales)
        z1 = []
        for s, scale in enumerate(spec.scales):
            f = scale // PATCH
            top = pyramid.margin - scale // 2
            image = pyramid.boxes[scale][:, top:top + h + PATCH * f - f, top:top + w + PATCH * f - f]
            z1.append(self._strided_fc1(s, image, f, h, w, row_chunk))
        return self._head(z1, loc, (h, w))

    def valid_probabilities(self, channels: np.ndarray, loc: Optional[np.ndarray] = None,
                            row_chunk: int = 8) -> np.ndarray:
        """Unpadded single-scale pass: output ``(H-31, W-31)``, one value per full 32x32 window.

        Output ``(i, j)`` is the window with top-left corner ``(i, j)``; ``loc``
        holds the features of those windows' centres, shape ``(H-31, W-31, 8)``.
        """
        spec = self.spec
        if spec.n_streams > 1:
            raise ValidationError("valid_probabilities takes one stream; use slice_probabilities")
        c, h, w = channels.shape
        if c != spec.input_channels:
            raise ValidationError(f"slice has {c} channels, network expects {spec.input_channels}")
        if h < PATCH or w < PATCH:
            raise ValidationError(f"dense input must be at least {PATCH}x{PATCH}, got {h}x{w}")
        oh, ow = h - PATCH + 1, w - PATCH + 1
        if spec.injection != "none" and (loc is None or loc.shape != (oh, ow, N_LOCATION)):
            raise ValidationError(f"location features of shape ({oh}, {ow}, {N_LOCATION}) required")
        return self._head([self._fc1_windows(0, channels, row_chunk)], loc, (oh, ow))


def convert_to_fully_convolutional(network: Network) -> DenseNetwork:
    return DenseNetwork(network)


def segment_dense(network: Network, case: CaseRecord, normalize: bool = True,
                  checkpoint_id: str = "") -> ProbabilityMap:
    """Segmentation with one dense pass per slice (per phase for coarse scales)."""
    dense = network if isinstance(network, DenseNetwork) else DenseNetwork(network)
    loc = _require_location(dense.network, case)
    if normalize:
        case = normalized_case(case)
    brain = case.brain_mask.values == 1
    out = np.zeros(brain.shape, dtype=np.float32)
    for z in range(brain.shape[0]):
        if not brain[z].any():
            continue
        ch = np.stack([case.flair.values[z], case.t1.values[z]])
        prob = dense.slice_probabilities(ch, None if loc is None else loc[z])
        out[z] = np.where(brain[z], prob, 0.0)
    return ProbabilityMap(Volume(out, case.voxel_size), case.case_id, checkpoint_id)


def segment(network: Network, case: CaseRecord, method: str = "auto", batch_size: int = 256,
            checkpoint_id: str = "") -> ProbabilityMap:
    """``auto`` runs single-scale networks densely and multi-scale ones by sliding window.

    ``dense`` also accepts the late-fusion networks (msiw, msws).
    """
    if method not in ("auto", "dense", "sliding"):
        raise ValidationError(f"unknown segmentation method {method!r}")
    if method == "dense" or (method == "auto" and network.spec.fusion == "ss"):
        return segment_dense(network, case, checkpoint_id=checkpoint_id)
    return segment_sliding_window(network, case, batch_size, checkpoint_id=checkpoint_id)


def apply_threshold(prob, t: float) -> Volume:
    """Binary mask of voxels with probability strictly greater than ``t``."""
    if not 0 <= t <= 1:
        raise ValidationError(f"threshold must lie in [0, 1], got {t}")
    vol = prob.volume if isinstance(prob, ProbabilityMap) else prob
    return Volume((vol.values > t).astype(np.uint8), vol.voxel_size)


def save_probability_map(pmap: ProbabilityMap, path) -> None:
    np.ascontiguousarray(pmap.values, dtype="<f4").tofile(path)


def load_probability_map(path, like: Volume, case_id: str = "") -> ProbabilityMap:
    """Read a raw f32 map on the grid of ``like``."""
    data = np.fromfile(path, dtype="<f4")
    if data.size != like.values.size:
        raise ValidationError(f"{path}: {data.size} values, expected {like.values.size}")
    return ProbabilityMap(Volume(data.reshape(like.shape).astype(np.float32), like.voxel_size), case_id)
