"""Primary (LR -> HR) and auxiliary (HR difference) models on a shared extractor."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import grad
from .errors import ConfigError, DimensionError, ParseError
from .meshcore import DEFAULT_K, NormStats, build_graph_features, edge_features, project
from .mpnn import MlpBlock, MpnnLayer

CHECKPOINT_FORMAT = "meshsr-checkpoint/1"


@dataclass
class Architecture:
    kind: str = "mgn"
    hidden: int = 30
    n_lr_layers: int = 3
    n_hr_layers: int = 3
    node_centering: bool = True
    message_centering: bool = True
    k: int = DEFAULT_K
    d: int = 1
    dim: int = 2


class SharedExtractor:
    """Encoder, LR processor, latent kNN upsampler and HR processor."""

    def __init__(self, encoder, lr_layers, hr_layers, stats, k=DEFAULT_K, edge_encoder=None):
        self.encoder = encoder
        self.edge_encoder = edge_encoder
        self.lr_layers = list(lr_layers)
        self.hr_layers = list(hr_layers)
        self.stats = stats
        self.k = int(k)
        needs_edges = any(l.kind == "mgn" for l in self.lr_layers + self.hr_layers)
        if needs_edges and edge_encoder is None:
            raise ConfigError("MGN processors need an edge encoder")

    @property
    def hidden(self):
        return self.encoder.out_dim

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder")
        if self.edge_encoder is not None:
            yield from self.edge_encoder.named_parameters("edge_encoder")
        for i, layer in enumerate(self.lr_layers):
            yield from layer.named_parameters(f"lr{i}")
        for i, layer in enumerate(self.hr_layers):
            yield from layer.named_parameters(f"hr{i}")


def _process(layers, x, mesh, extractor):
    e = None
    if extractor.edge_encoder is not None and layers:
        e = extractor.edge_encoder(edge_features(mesh, extractor.stats))
    for layer in layers:
        x, e = layer(x, mesh.graph, e)
    return x


def extract(shared, lr_sample, hr_mesh):
    """Latent embeddings of ``lr_sample`` on the nodes of ``hr_mesh``."""
    nodes, _, _ = build_graph_features(lr_sample, shared.stats)
    x = shared.encoder(nodes)
    x = _process(shared.lr_layers, x, lr_sample.mesh, shared)
    x = project(x, lr_sample.mesh, hr_mesh, shared.k)
    return _process(shared.hr_layers, x, hr_mesh, shared)


class ModelParams:
    """Shared extractor plus the two decoders; owns every learnable tensor."""

    def __init__(self, shared, decoder_f, decoder_g, arch):
        self.shared = shared
        self.decoder_f = decoder_f
        self.decoder_g = decoder_g
        self.arch = arch
        if decoder_f.out_dim != arch.d or decoder_g.out_dim != arch.d:
            raise DimensionError("decoder output width must equal the field dimension")

    @classmethod
    def init(cls, arch, stats, seed=0):
        rng = np.random.default_rng(seed)
        h = arch.hidden
        encoder = MlpBlock.init([arch.d + arch.dim, h, h, h], rng)
        edge_encoder = MlpBlock.init([2 * arch.dim, h, h, h], rng) if arch.kind == "mgn" else None
        lr_layers = [MpnnLayer.init(arch.kind, h, rng, arch.node_centering, arch.message_centering)
                     for _ in range(arch.n_lr_layers)]
        hr_layers = [MpnnLayer.init(arch.kind, h, rng, arch.node_centering, arch.message_centering)
                     for _ in range(arch.n_hr_layers)]
        shared = SharedExtractor(encoder, lr_layers, hr_layers, stats, arch.k, edge_encoder)
        decoder_f = MlpBlock.init([h, h, h, arch.d], rng, zero_last=True)
        decoder_g = MlpBlock.init([h, h, h, arch.d], rng, zero_last=True)
        return cls(shared, decoder_f, decoder_g, arch)

    @property
    def stats(self):
        return self.shared.stats

    def named_parameters(self):
        yield from self.shared.named_parameters()
        yield from self.decoder_f.named_parameters("decoder_f")
        yield from self.decoder_g.named_parameters("decoder_g")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def f_parameters(self):
        """Everything the primary model depends on (extractor + its decoder)."""
        return [p for name, p in self.named_parameters() if not name.startswith("decoder_g")]

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, a in zip(self.parameters(), snap):
            p.data[...] = a


def upsample_lr(params, lr_sample, hr_mesh):
    """Normalized LR field projected onto the HR nodes (the residual base)."""
    u = params.stats.norm_values(lr_sample.values)
    return project(u, lr_sample.mesh, hr_mesh, params.shared.k)


def decode_f(params, latent, lr_sample, hr_mesh):
    return grad.add(params.decoder_f(latent), upsample_lr(params, lr_sample, hr_mesh))


def forward_f(params, lr_sample, hr_mesh):
    """HR prediction in normalized field units."""
    return decode_f(params, extract(params.shared, lr_sample, hr_mesh), lr_sample, hr_mesh)


def decode_g(params, latent_r, latent_s, lr_r, lr_s, hr_mesh_r, hr_mesh_s):
    k = params.shared.k
    diff = grad.sub(latent_r, project(latent_s, hr_mesh_s, hr_mesh_r, k))
    stats = params.stats
    base = grad.sub(upsample_lr(params, lr_r, hr_mesh_r),
                    project(stats.norm_values(lr_s.values), lr_s.mesh, hr_mesh_r, k))
    return grad.add(params.decoder_g(diff), base)


def forward_g(params, lr_r, lr_s, hr_mesh_r, hr_mesh_s):
    """Predicted HR difference (r minus s) on the nodes of ``hr_mesh_r``."""
    shared = params.shared
    return decode_g(params, extract(shared, lr_r, hr_mesh_r), extract(shared, lr_s, hr_mesh_s),
                    lr_r, lr_s, hr_mesh_r, hr_mesh_s)


def target_g(hr_r, hr_s, k=DEFAULT_K, stats=None):
    """``u_r - kNN(u_s)`` on the nodes of ``hr_r``; normalized when ``stats`` is given."""
    u_r, u_s = hr_r.values, hr_s.values
    if stats is not None:
        u_r, u_s = stats.norm_values(u_r), stats.norm_values(u_s)
    return grad.sub(grad.Tensor(u_r), project(u_s, hr_s.mesh, hr_r.mesh, k))


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, p in params.named_parameters():
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").reshape(-1))
        offset += p.data.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    (path / "params.bin").write_bytes(blob.astype("<f8").tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": asdict(params.arch),
        "stats": params.stats.to_json(),
        "tensors": table,
        "blob": "params.bin",
        "n_values": int(offset),
    }
    if extra:
        manifest["extra"] = extra
    with open(path / "checkpoint.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "checkpoint.json").read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path / "checkpoint.json", "manifest", exc.msg) from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(path / "checkpoint.json", "manifest", "not a meshsr checkpoint")
    arch = Architecture(**manifest["architecture"])
    params = ModelParams.init(arch, NormStats.from_json(manifest["stats"]))
    blob = np.frombuffer((path / manifest["blob"]).read_bytes(), dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise ParseError(path / manifest["blob"], "blob",
                         f"expected {manifest['n_values']} values, found {blob.size}")
    named = dict(params.named_parameters())
    if set(named) != {t["name"] for t in manifest["tensors"]}:
        raise ParseError(path / "checkpoint.json", "tensors", "tensor table does not match model")
    for t in manifest["tensors"]:
        p = named[t["name"]]
        if list(p.shape) != t["shape"]:
            raise ParseError(path / "checkpoint.json", t["name"], "shape mismatch")
        n = int(np.prod(t["shape"]))
        p.data[...] = blob[t["offset"]:t["offset"] + n].reshape(t["shape"])
    return params
