# nn/model.py

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import ModelConfig
from ..services.errors import ConfigError, InputTooNarrow, ShapeMismatch, UnknownLayer
from ..services.shared_config import BATCHNORM_EPS, BATCHNORM_MOMENTUM, LSTM_FORGET_BIAS
from . import layers, numeric, recurrent

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@dataclass
class ConvStageCache:
    conv: List[layers.ConvCache]
    bn: Optional[layers.BatchNormCache]
    relu: List[np.ndarray]
    pool: Optional[List[layers.PoolCache]]


@dataclass
class BatchCache:
    conv: List[ConvStageCache] = field(default_factory=list)
    blstm: List[List[recurrent.BlstmCache]] = field(default_factory=list)
    fc_inputs: List[np.ndarray] = field(default_factory=list)
    logprobs: List[np.ndarray] = field(default_factory=list)
    activations: Dict[str, List[np.ndarray]] = field(default_factory=dict)


class CRNN:
    """
    Hybrid convolutional-recurrent transcriber (or the RNN-only baseline): conv stack ->
    column features -> BLSTM stack -> linear -> log-softmax, one output row per timestep.
    """

    def __init__(self, config: ModelConfig, params: Params, buffers: Optional[Params] = None, threads: int = 1):
        if config.num_classes < 2:
            raise ConfigError("model needs num_classes >= 2 (labels + blank)")
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self.threads = max(1, threads)
        self._check_params()

    # ---------------- Construction ----------------
    @classmethod
    def parameter_shapes(cls, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        if config.variant == "hybrid":
            in_ch = 1
            for i, (out_ch, k) in enumerate(zip(config.conv_channels, config.conv_kernels), 1):
                shapes[f"conv{i}.weight"] = (out_ch, in_ch, k, k)
                shapes[f"conv{i}.bias"] = (out_ch,)
                if i in config.batchnorm_after:
                    shapes[f"bn{i}.gamma"] = (out_ch,)
                    shapes[f"bn{i}.beta"] = (out_ch,)
                in_ch = out_ch
        dim, hidden = config.feature_dim, config.hidden_size
        for j in range(1, config.blstm_layers + 1):
            for direction in ("fwd", "bwd"):
                shapes[f"blstm{j}.{direction}.W"] = (4 * hidden, dim)
                shapes[f"blstm{j}.{direction}.U"] = (4 * hidden, hidden)
                shapes[f"blstm{j}.{direction}.b"] = (4 * hidden,)
            dim = 2 * hidden
        shapes["fc.weight"] = (config.num_classes, dim)
        shapes["fc.bias"] = (config.num_classes,)
        return shapes

    @classmethod
    def buffer_shapes(cls, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        if config.variant == "hybrid":
            for i in config.batchnorm_after:
                channels = config.conv_channels[i - 1]
                shapes[f"bn{i}.running_mean"] = (channels,)
                shapes[f"bn{i}.running_var"] = (channels,)
        return shapes

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, threads: int = 1) -> "CRNN":
        """Xavier-uniform weights, zero biases, LSTM forget-gate bias 1, BN gamma 1 / beta 0."""
        rng = np.random.default_rng(seed)
        params: Params = {}
        for name, shape in cls.parameter_shapes(config).items():
            if name.endswith(".weight") and len(shape) == 4:
                receptive = shape[2] * shape[3]
                values = _xavier(rng, shape, shape[1] * receptive, shape[0] * receptive)
            elif name.endswith((".W", ".U", "fc.weight")):
                values = _xavier(rng, shape, shape[1], shape[0])
            elif name.endswith(".gamma"):
                values = np.ones(shape)
            else:
                values = np.zeros(shape)
            if name.endswith(".b"):
                hidden = shape[0] // 4
                values[hidden:2 * hidden] = LSTM_FORGET_BIAS
            params[name] = numeric.cast(values)
        buffers = {
            name: numeric.cast(np.ones(shape) if name.endswith("running_var") else np.zeros(shape))
            for name, shape in cls.buffer_shapes(config).items()
        }
        logger.info(f"🧠 Initialized {config.variant} model: {sum(p.size for p in params.values())} parameters, seed {seed}")
        return cls(config, params, buffers, threads)

    def _check_params(self) -> None:
        expected = {**self.parameter_shapes(self.config), **self.buffer_shapes(self.config)}
        actual = {**self.params, **self.buffers}
        missing = sorted(set(expected) - set(actual))
        if missing:
            raise ShapeMismatch(f"model is missing tensors: {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(actual[name].shape) != tuple(shape):
                raise ShapeMismatch(f"{name}: expected shape {shape}, got {actual[name].shape}")

    def astype(self, dtype) -> "CRNN":
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    # ---------------- Input ----------------
    def prepare(self, image: np.ndarray) -> np.ndarray:
        """Normalize to [-1, 1] and right-pad (edge) to the pooling width multiple; returns [1, H, W]."""
        image = np.asarray(image)
        if image.ndim != 2 or image.shape[0] != self.config.input_height:
            raise ShapeMismatch(f"model expects height {self.config.input_height}, got image shape {image.shape}")
        width = image.shape[1]
        if width < self.config.min_width:
            raise InputTooNarrow(f"width {width} is below the minimum {self.config.min_width} for this model")
        aligned = self.config.aligned_width(width)
        if aligned != width:
            image = np.pad(image, ((0, 0), (0, aligned - width)), mode="edge")
        return numeric.cast((image - 0.5) / 0.5)[None]

    def layer_names(self) -> List[str]:
        names = ["input"]
        if self.config.variant == "hybrid":
            for i, pool in enumerate(self.config.pools, 1):
                names.append(f"conv{i}")
                if pool is not None:
                    names.append(f"pool{i}")
        return names

    # ---------------- Forward ----------------
    def _map(self, fn: Callable, items: Sequence) -> List:
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def forward_batch(
        self,
        images: Sequence[np.ndarray],
        train: bool = False,
        update_stats: bool = True,
        keep_activations: bool = False,
    ) -> Tuple[List[np.ndarray], List[np.ndarray], BatchCache]:
        """Returns per-sample (logits, log-probabilities, cache); samples may differ in width."""
        cfg, p = self.config, self.params
        cache = BatchCache()
        maps = self._map(self.prepare, images)
        if keep_activations:
            cache.activations["input"] = maps

        if cfg.variant == "hybrid":
            for i, (pad, pool) in enumerate(zip(cfg.conv_pads, cfg.pools), 1):
                w, b = p[f"conv{i}.weight"], p[f"conv{i}.bias"]
                results = self._map(lambda x: layers.conv2d(x, w, b, pad=pad), maps)
                maps = [r[0] for r in results]
                bn_cache = None
                if i in cfg.batchnorm_after:
                    maps, bn_cache = self._batchnorm(i, maps, train, update_stats)
                relu_out = [layers.relu(m) for m in maps]
                maps = [r[0] for r in relu_out]
                if keep_activations:
                    cache.activations[f"conv{i}"] = maps
                pool_caches = None
                if pool is not None:
                    pooled = [layers.maxpool2d(m, pool) for m in maps]
                    maps = [r[0] for r in pooled]
                    pool_caches = [r[1] for r in pooled]
                    if keep_activations:
                        cache.activations[f"pool{i}"] = maps
                cache.conv.append(ConvStageCache([r[1] for r in results], bn_cache, [r[1] for r in relu_out], pool_caches))
            seqs = [layers.feature_columns(m) for m in maps]
        else:
            seqs = [m[0].T.copy() for m in maps]

        for j in range(1, cfg.blstm_layers + 1):
            fwd = self._lstm_params(j, "fwd")
            bwd = self._lstm_params(j, "bwd")
            results = self._map(lambda s: recurrent.blstm_layer(s, fwd, bwd), seqs)
            seqs = [r[0] for r in results]
            cache.blstm.append([r[1] for r in results])

        cache.fc_inputs = seqs
        logits = [layers.linear(s, p["fc.weight"], p["fc.bias"]) for s in seqs]
        logprobs = [layers.log_softmax(z) for z in logits]
        numeric.check_finite("model output", *logprobs)
        cache.logprobs = logprobs
        return logits, logprobs, cache

    def _batchnorm(self, i: int, maps: List[np.ndarray], train: bool, update_stats: bool):
        gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
        mean_key, var_key = f"bn{i}.running_mean", f"bn{i}.running_var"
        if not train:
            return layers.batchnorm(
                maps, gamma, beta, BATCHNORM_EPS, train=False,
                running_mean=self.buffers[mean_key], running_var=self.buffers[var_key],
            )
        out, bn_cache = layers.batchnorm(maps, gamma, beta, BATCHNORM_EPS, train=True)
        if update_stats:
            m = BATCHNORM_MOMENTUM
            self.buffers[mean_key] = (m * self.buffers[mean_key] + (1 - m) * bn_cache.mean).astype(gamma.dtype)
            self.buffers[var_key] = (m * self.buffers[var_key] + (1 - m) * bn_cache.var).astype(gamma.dtype)
        return out, bn_cache

    def _lstm_params(self, layer: int, direction: str) -> recurrent.LstmParams:
        prefix = f"blstm{layer}.{direction}."
        return {key: self.params[prefix + key] for key in ("W", "U", "b")}

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Inference-mode log-probabilities [T, num_classes] for one image."""
        _, logprobs, _ = self.forward_batch([image], train=False)
        return logprobs[0]

    def activations(self, image: np.ndarray, layer: str) -> np.ndarray:
        """Inference-mode activation map [C, H, W] of a named layer."""
        names = self.layer_names()
        if layer not in names:
            raise UnknownLayer(f"unknown layer {layer!r}; valid layers: {', '.join(names)}")
        _, _, cache = self.forward_batch([image], train=False, keep_activations=True)
        return cache.activations[layer][0]

    # ---------------- Backward ----------------
    def backward_batch(self, dlogits: Sequence[np.ndarray], cache: BatchCache) -> Params:
        """Gradients of the summed per-sample objectives, accumulated in sample order."""
        cfg, p = self.config, self.params
        grads: Params = {name: np.zeros_like(value) for name, value in p.items()}
        dtype = p["fc.weight"].dtype
        dlogits = [np.asarray(d, dtype=dtype) for d in dlogits]

        dseqs = []
        for d, x in zip(dlogits, cache.fc_inputs):
            dx, dw, db = layers.linear_backward(d, x, p["fc.weight"])
            grads["fc.weight"] += dw
            grads["fc.bias"] += db
            dseqs.append(dx)

        for j in range(cfg.blstm_layers, 0, -1):
            results = self._map(lambda args: recurrent.blstm_backward(*args), list(zip(dseqs, cache.blstm[j - 1])))
            dseqs = []
            for dx, gf, gb in results:
                for key in ("W", "U", "b"):
                    grads[f"blstm{j}.fwd.{key}"] += gf[key]
                    grads[f"blstm{j}.bwd.{key}"] += gb[key]
                dseqs.append(dx)

        if cfg.variant == "hybrid":
            dmaps = [layers.feature_columns_backward(d) for d in dseqs]
            for i in range(len(cfg.conv_channels), 0, -1):
                stage = cache.conv[i - 1]
                if stage.pool is not None:
                    dmaps = [layers.maxpool2d_backward(d, pc) for d, pc in zip(dmaps, stage.pool)]
                dmaps = [layers.relu_backward(d, mask) for d, mask in zip(dmaps, stage.relu)]
                if stage.bn is not None:
                    dmaps, dgamma, dbeta = layers.batchnorm_backward(dmaps, stage.bn)
                    grads[f"bn{i}.gamma"] += dgamma
                    grads[f"bn{i}.beta"] += dbeta
                results = self._map(lambda args: layers.conv2d_backward(*args), list(zip(dmaps, stage.conv)))
                dmaps = []
                for dx, dw, db in results:
                    grads[f"conv{i}.weight"] += dw
                    grads[f"conv{i}.bias"] += db
                    dmaps.append(dx)

        numeric.check_finite("gradients", *grads.values())
        return grads

    def kink_signature(self, cache: BatchCache) -> Tuple[bytes, ...]:
        """ReLU masks and pool routing of a forward pass; finite differences are unreliable where this changes."""
        parts = []
        for stage in cache.conv:
            parts.extend(np.packbits(mask).tobytes() for mask in stage.relu)
            if stage.pool is not None:
                parts.extend(pc.argmax.tobytes() for pc in stage.pool)
        return tuple(parts)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def model_forward(image: np.ndarray, model: CRNN) -> np.ndarray:
    return model.forward(image)
