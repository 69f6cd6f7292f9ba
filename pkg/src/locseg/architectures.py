"""The four patch-fusion networks and location-feature injection.

SS     one conv stack on the 32x32 scale.
MSEF   one conv stack on all scales stacked as channels.
MSIW   one conv stack per scale, each with its own first FC layer.
MSWS   as MSIW but every scale runs through a single shared conv stack.

Location features (8 values, multiplied by ``alpha``) are concatenated to the
input of the 300-wide layer (LCL), the 200-wide layer (FFCL) or the final
2-wide layer (SFCL).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .errors import ShapeError, ValidationError
from .rng import stream

FUSIONS = ("ss", "msef", "msiw", "msws")
INJECTIONS = ("none", "lcl", "ffcl", "sfcl")
FULL_CONV_STACK = ((20, 7), (40, 5), (80, 3), (110, 3))
FULL_FC_WIDTHS = (300, 200, 2)
N_LOCATION = 8
PATCH = 32
CHECKPOINT_MAGIC = b"LSNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    fusion: str = "ss"
    injection: str = "none"
    alpha: float = 1.0
    conv_stack: Tuple[Tuple[int, int], ...] = FULL_CONV_STACK
    fc_widths: Tuple[int, ...] = FULL_FC_WIDTHS
    dropout: float = 0.3
    scales: Tuple[int, ...] = (32,)
    channels_per_scale: int = 2

    def __post_init__(self):
        object.__setattr__(self, "fusion", self.fusion.lower())
        object.__setattr__(self, "injection", self.injection.lower())
        object.__setattr__(self, "conv_stack", tuple((int(c), int(k)) for c, k in self.conv_stack))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        self.validate()

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ValidationError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSIONS}")
        if self.injection not in INJECTIONS:
            raise ValidationError(f"unknown injection point {self.injection!r}; expected one of {INJECTIONS}")
        if self.injection != "none" and not self.alpha >= 0:
            raise ValidationError(f"alpha must be non-negative when injecting, got {self.alpha}")
        if self.fusion in ("msiw", "msws") and self.injection == "lcl":
            raise ValidationError("LCL injection is only defined for single-stream networks (ss, msef)")
        if len(self.fc_widths) != 3 or self.fc_widths[-1] != 2:
            raise ValidationError(f"fc_widths must be three widths ending in 2, got {list(self.fc_widths)}")
        if not self.conv_stack:
            raise ValidationError("conv_stack is empty")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.fusion == "ss" and len(self.scales) != 1:
            raise ValidationError(f"ss uses exactly one scale, got {list(self.scales)}")
        if self.fusion != "ss" and len(self.scales) < 2:
            raise ValidationError(f"{self.fusion} needs at least two scales, got {list(self.scales)}")
        if self.conv_output_size() < 1:
            raise ValidationError("conv stack shrinks a 32x32 patch to nothing")

    def conv_output_size(self) -> int:
        size = PATCH
        for _, k in self.conv_stack:
            size -= k - 1
        return size

    @property
    def n_streams(self) -> int:
        return len(self.scales) if self.fusion in ("msiw", "msws") else 1

    @property
    def input_channels(self) -> int:
        if self.fusion == "msef":
            return self.channels_per_scale * len(self.scales)
        return self.channels_per_scale

    @property
    def flat_length(self) -> int:
        return self.conv_stack[-1][0] * self.conv_output_size() ** 2

    def to_json(self) -> str:
        d = asdict(self)
        d["conv_stack"] = [list(c) for c in self.conv_stack]
        d["fc_widths"] = list(self.fc_widths)
        d["scales"] = list(self.scales)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Dict) -> "NetworkSpec":
        d = dict(d)
        d.pop("channels_per_scale", None)
        return cls(**d)

    @classmethod
    def default_for(cls, fusion: str, injection: str = "none", alpha: float = 1.0, **kw) -> "NetworkSpec":
        scales = (32,) if fusion.lower() == "ss" else (32, 64, 128)
        return cls(fusion=fusion, injection=injection, alpha=alpha, scales=kw.pop("scales", scales), **kw)


def _conv_name(stream_idx: int, layer: int, spec: NetworkSpec) -> str:
    if spec.fusion == "msiw":
        return f"conv{stream_idx}.{layer}"
    return f"conv.{layer}"


def _fc1_name(stream_idx: int, spec: NetworkSpec) -> str:
    return f"fc1_{stream_idx}" if spec.fusion in ("msiw", "msws") else "fc1"


def layer_list(spec: NetworkSpec) -> List[E.LayerSpec]:
    """Flat description of the topology (shared conv layers listed once per stream)."""
    layers = []
    streams = range(spec.n_streams)
    for s in streams:
        c_in = spec.input_channels
        for l, (c_out, k) in enumerate(spec.conv_stack):
            layers.append(E.LayerSpec("conv2d", _conv_name(s, l, spec), (c_out, c_in, k)))
            layers.append(E.LayerSpec("relu", f"relu.s{s}.{l}"))
            c_in = c_out
    w1, w2, w3 = spec.fc_widths
    lcl = N_LOCATION if spec.injection == "lcl" else 0
    for s in streams:
        layers.append(E.LayerSpec("dropout", f"drop0_{s}", (spec.dropout,)))
        if lcl:
            layers.append(E.LayerSpec("concat", "inject.lcl", (spec.flat_length, N_LOCATION)))
        layers.append(E.LayerSpec("fully_connected", _fc1_name(s, spec), (w1, spec.flat_length + lcl)))
        layers.append(E.LayerSpec("relu", f"relu.fc1_{s}"))
    if spec.n_streams > 1:
        layers.append(E.LayerSpec("concat", "fuse", (w1,) * spec.n_streams))
    joint = w1 * spec.n_streams
    layers.append(E.LayerSpec("dropout", "drop1", (spec.dropout,)))
    ff = N_LOCATION if spec.injection == "ffcl" else 0
    if ff:
        layers.append(E.LayerSpec("concat", "inject.ffcl", (joint, N_LOCATION)))
    layers.append(E.LayerSpec("fully_connected", "fc2", (w2, joint + ff)))
    layers.append(E.LayerSpec("relu", "relu.fc2"))
    layers.append(E.LayerSpec("dropout", "drop2", (spec.dropout,)))
    sf = N_LOCATION if spec.injection == "sfcl" else 0
    if sf:
        layers.append(E.LayerSpec("concat", "inject.sfcl", (w2, N_LOCATION)))
    layers.append(E.LayerSpec("fully_connected", "fc3", (w3, w2 + sf)))
    layers.append(E.LayerSpec("softmax", "softmax"))
    return layers


def parameter_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Declared parameter order and shapes; shared layers appear once."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in layer_list(spec):
        if layer.name in {n.rsplit(".", 1)[0] for n in shapes}:
            continue
        if layer.kind == "conv2d":
            c_out, c_in, k = layer.extents
            shapes[f"{layer.name}.w"] = (c_out, c_in, k, k)
            shapes[f"{layer.name}.b"] = (c_out,)
        elif layer.kind == "fully_connected":
            out, inp = layer.extents
            shapes[f"{layer.name}.w"] = (out, inp)
            shapes[f"{layer.name}.b"] = (out,)
    return shapes


def parameter_count(spec: NetworkSpec) -> Dict[str, int]:
    """Per-layer parameter counts plus ``conv``, ``fc`` and ``total`` sums."""
    counts: Dict[str, int] = {}
    for name, shape in parameter_shapes(spec).items():
        layer = name.rsplit(".", 1)[0]
        counts[layer] = counts.get(layer, 0) + int(np.prod(shape))
    conv = sum(v for k, v in counts.items() if k.startswith("conv"))
    fc = sum(v for k, v in counts.items() if k.startswith("fc"))
    counts.update(conv=conv, fc=fc, total=conv + fc)
    return counts


def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 4:
        c_out, c_in, k, _ = shape
        return c_in * k * k, c_out * k * k
    out, inp = shape
    return inp, out


def init_parameters(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> E.ParameterStore:
    store = E.ParameterStore()
    for i, (name, shape) in enumerate(parameter_shapes(spec).items()):
        if name.endswith(".b"):
            store.add(name, np.zeros(shape, dtype=dtype))
        else:
            fan_in, fan_out = _fans(shape)
            store.add(name, E.glorot_init(shape, fan_in, fan_out, stream(seed, "init", i), dtype))
    return store


@dataclass
class ForwardCache:
    conv: List[List[tuple]] = field(default_factory=list)  # per stream: (input, cols, pre-activation), NHWC
    fc1_in: List[np.ndarray] = field(default_factory=list)
    fc1_pre: List[np.ndarray] = field(default_factory=list)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    fc2_in: Optional[np.ndarray] = None
    fc2_pre: Optional[np.ndarray] = None
    fc3_in: Optional[np.ndarray] = None
    flat_shape: Tuple[int, ...] = ()


class Network:
    """A topology from :class:`NetworkSpec` bound to a :class:`ParameterStore`."""

    def __init__(self, spec: NetworkSpec, store: Optional[E.ParameterStore] = None, seed: int = 0,
                 dtype=np.float32, conv_method: str = "im2col"):
        self.spec = spec
        self.store = store if store is not None else init_parameters(spec, seed, dtype)
        expected = parameter_shapes(spec)
        if list(self.store.params) != list(expected):
            raise ValidationError("parameter store does not match the network spec")
        for name, shape in expected.items():
            if self.store.params[name].shape != shape:
                raise ShapeError(f"{name}: stored shape {self.store.params[name].shape} != {shape}")
        self.conv_method = conv_method

    @property
    def dtype(self):
        return self.store.dtype

    def p(self, name: str) -> np.ndarray:
        return self.store.params[name]

    # -- inputs ---------------------------------------------------------------

    def network_input(self, patches: np.ndarray, sample_scales: Sequence[int]) -> np.ndarray:
        """Select/arrange ``(N, n_scales, 2, 32, 32)`` sample patches for this topology."""
        try:
            idx = [list(sample_scales).index(s) for s in self.spec.scales]
        except ValueError:
            raise ValidationError(f"samples carry scales {list(sample_scales)}, network needs {list(self.spec.scales)}")
        x = patches[:, idx]
        n = x.shape[0]
        if self.spec.fusion == "ss":
            x = x[:, 0]
        elif self.spec.fusion == "msef":
            x = x.reshape(n, -1, PATCH, PATCH)
        return np.ascontiguousarray(x, dtype=self.dtype)

    def _check_input(self, x: np.ndarray) -> None:
        spec = self.spec
        if spec.n_streams > 1:
            want = (spec.n_streams, spec.channels_per_scale, PATCH, PATCH)
            got = x.shape[1:]
        else:
            want = (spec.input_channels, PATCH, PATCH)
            got = x.shape[1:]
        if tuple(got) != want:
            raise ShapeError(f"{spec.fusion} expects per-sample input {want}, got {tuple(got)}")

    # -- forward ----------------------------------------------------------------

    def _dropout(self, key: str, h: np.ndarray, train: bool, rngs, cache: ForwardCache) -> np.ndarray:
        p = self.spec.dropout
        if not train or p == 0:
            return h
        mask = np.stack([E.dropout_mask(h.shape[1:], p, r, h.dtype.type) for r in rngs])
        cache.masks[key] = mask
        return h * mask

    def _inject(self, h: np.ndarray, loc: Optional[np.ndarray], point: str) -> np.ndarray:
        if self.spec.injection != point:
            return h
        if loc is None:
            raise ValidationError(f"network injects location features at {point} but none were given")
        if loc.shape != (h.shape[0], N_LOCATION):
            raise ShapeError(f"location features must be ({h.shape[0]}, {N_LOCATION}), got {loc.shape}")
        return np.concatenate([h, (self.spec.alpha * loc).astype(h.dtype)], axis=1)

    def _conv_stack(self, s: int, h: np.ndarray, cache: Optional[ForwardCache]) -> np.ndarray:
        """Run one stream's conv stack; ``h`` is channels-last."""
        layers = []
        for l in range(len(self.spec.conv_stack)):
            name = _conv_name(s, l, self.spec)
            w, b = self.p(f"{name}.w"), self.p(f"{name}.b")
            if self.conv_method == "im2col":
                z, cols = E.conv_forward_nhwc(h, w, b)
            else:
                z = E.to_nhwc(E.conv2d_forward(E.to_nchw(h), w, b, method=self.conv_method))
                cols = None
            if cache is not None:
                layers.append((h, cols, z))
            h = E.relu(z)
        if cache is not None:
            cache.conv.append(layers)
        return h

    def forward(self, x: np.ndarray, loc: Optional[np.ndarray] = None, mode: str = "infer",
                rngs: Optional[Sequence[np.random.Generator]] = None, keep_cache: bool = False):
        """Logits for a batch. Returns ``(logits, cache)``; ``cache`` is None unless requested."""
        if mode not in ("train", "infer"):
            raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x)
        self._check_input(x)
        train = mode == "train" and self.spec.dropout > 0
        if train and (rngs is None or len(rngs) != x.shape[0]):
            raise ValidationError("train mode needs one random generator per sample")
        cache = ForwardCache() if keep_cache or train else None
        spec = self.spec
        fc1_out = []
        for s in range(spec.n_streams):
            xs = x[:, s] if spec.n_streams > 1 else x
            h = self._conv_stack(s, E.to_nhwc(xs), cache)
            flat = h.reshape(h.shape[0], -1)
            if cache is not None:
                cache.flat_shape = h.shape
            a = self._dropout(f"drop0_{s}", flat, train, rngs, cache)
            a = self._inject(a, loc, "lcl")
            name = _fc1_name(s, spec)
            z1 = E.fully_connected(a, self.p(f"{name}.w"), self.p(f"{name}.b"))
            if cache is not None:
                cache.fc1_in.append(a)
                cache.fc1_pre.append(z1)
            fc1_out.append(E.relu(z1))
        h1 = np.concatenate(fc1_out, axis=1) if len(fc1_out) > 1 else fc1_out[0]
        a2 = self._inject(self._dropout("drop1", h1, train, rngs, cache), loc, "ffcl")
        z2 = E.fully_connected(a2, self.p("fc2.w"), self.p("fc2.b"))
        h2 = E.relu(z2)
        a3 = self._inject(self._dropout("drop2", h2, train, rngs, cache), loc, "sfcl")
        logits = E.fully_connected(a3, self.p("fc3.w"), self.p("fc3.b"))
        if cache is not None:
            cache.fc2_in, cache.fc2_pre, cache.fc3_in = a2, z2, a3
        return logits, (cache if keep_cache or train else None)

    def predict(self, x: np.ndarray, loc: Optional[np.ndarray] = None, batch_size: int = 256) -> np.ndarray:
        """Infer-mode softmax probabilities ``(N, 2)``."""
        out = []
        for i in range(0, x.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            logits, _ = self.forward(x[sl], None if loc is None else loc[sl], "infer")
            out.append(E.softmax(logits))
        if not out:
            return np.zeros((0, 2), dtype=self.dtype)
        return np.concatenate(out)

    # -- backward -------------------------------------------------------------

    def backward(self, cache: ForwardCache, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients for one forward pass (not yet added to the store)."""
        spec = self.spec
        grads: Dict[str, np.ndarray] = {}

        def add(name, g):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g

        w2 = spec.fc_widths[1]
        g3_in, gw, gb = E.fully_connected_backward(grad_logits, cache.fc3_in, self.p("fc3.w"))
        add("fc3.w", gw)
        add("fc3.b", gb)
        g = g3_in[:, :w2]
        if "drop2" in cache.masks:
            g = g * cache.masks["drop2"]
        g = E.relu_backward(g, cache.fc2_pre)
        g2_in, gw, gb = E.fully_connected_backward(g, cache.fc2_in, self.p("fc2.w"))
        add("fc2.w", gw)
        add("fc2.b", gb)
        w1 = spec.fc_widths[0]
        g = g2_in[:, :w1 * spec.n_streams]
        if "drop1" in cache.masks:
            g = g * cache.masks["drop1"]
        flat_len = spec.flat_length
        for s in range(spec.n_streams):
            gs = E.relu_backward(g[:, s * w1:(s + 1) * w1], cache.fc1_pre[s])
            name = _fc1_name(s, spec)
            g1_in, gw, gb = E.fully_connected_backward(gs, cache.fc1_in[s], self.p(f"{name}.w"))
            add(f"{name}.w", gw)
            add(f"{name}.b", gb)
            gf = g1_in[:, :flat_len]
            if f"drop0_{s}" in cache.masks:
                gf = gf * cache.masks[f"drop0_{s}"]
            gh = gf.reshape(cache.flat_shape)
            layers = cache.conv[s]
            for l in reversed(range(len(spec.conv_stack))):
                h_in, cols, z = layers[l]
                gz = E.relu_backward(gh, z)
                cname = _conv_name(s, l, spec)
                w = self.p(f"{cname}.w")
                if cols is None:
                    cols = E.im2col(h_in, w.shape[2])
                gh, gw, gb = E.conv_backward_nhwc(gz, h_in.shape, w, cols, need_input_grad=l > 0)
                add(f"{cname}.w", gw)
                add(f"{cname}.b", gb)
        return grads

    def loss_and_grads(self, x, loc, labels, mode="train", rngs=None, normalizer: Optional[int] = None):
        """Cross-entropy summed over the batch divided by ``normalizer`` (default N)."""
        logits, cache = self.forward(x, loc, mode, rngs, keep_cache=True)
        n = x.shape[0]
        norm = normalizer or n
        loss, probs, grad = E.softmax_cross_entropy(logits, labels)
        scale = n / norm
        grads = self.backward(cache, (grad * scale).astype(self.dtype))
        return loss * scale, probs, grads

    def accumulate(self, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.store.grads[name] += g

    def activation_signature(self, cache: ForwardCache) -> bytes:
        """Packed signs of every ReLU pre-activation in a cached forward pass."""
        parts = [z > 0 for layers in cache.conv for (_, _, z) in layers]
        parts += [z > 0 for z in cache.fc1_pre] + [cache.fc2_pre > 0]
        return np.packbits(np.concatenate([p.reshape(-1) for p in parts])).tobytes()

    def gradient_check(self, x, loc, labels, step: float = 1e-5, tolerance: float = 1e-4,
                       entries_per_parameter: Optional[int] = None, seed: int = 0) -> E.GradCheckReport:
        """Finite-difference check in infer mode (dropout off); needs float64 parameters.

        Probes whose +/- step flips any ReLU are reported as kink crossings and
        replaced by other entries.
        """

        def loss_and_grad(with_grad: bool):
            if with_grad:
                loss, _, grads = self.loss_and_grads(x, loc, labels, mode="infer")
                self.accumulate(grads)
                return loss
            logits, cache = self.forward(x, loc, "infer", keep_cache=True)
            return E.softmax_cross_entropy(logits, labels)[0], self.activation_signature(cache)

        return E.gradient_check(loss_and_grad, self.store, step, tolerance, entries_per_parameter,
                                stream(seed, "gradient-check"))

    def astype(self, dtype) -> "Network":
        return Network(self.spec, self.store.astype(dtype), conv_method=self.conv_method)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(network: Network, path) -> None:
    spec_bytes = network.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_bytes)))
        fh.write(spec_bytes)
        for _, value in network.store:
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a network checkpoint (bad magic)")
    version, spec_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    spec = NetworkSpec.from_dict(json.loads(data[12:12 + spec_len].decode("utf-8")))
    offset = 12 + spec_len
    store = E.ParameterStore()
    for name, shape in parameter_shapes(spec).items():
        n = int(np.prod(shape))
        value = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        store.add(name, value.astype(dtype))
        offset += 4 * n
    if offset != len(data):
        raise ValidationError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return Network(spec, store)
