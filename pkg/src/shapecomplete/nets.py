"""The two network graphs: global structure inference (six-view 2D branch
with cascaded bidirectional sweeps, 2D-to-3D assembly, volumetric branch,
1x1x1 fusion classifier) and the guided local encoder-decoder.

Class channel 0 is "outside", channel 1 is "inside" everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import BLSTMParams, LSTMParams, Tensor
from .volumetric import FieldProfile, VolumeGrid


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalNetConfig:
    profile: FieldProfile = dc_field(default_factory=FieldProfile)
    channels_2d: tuple = (16, 32)
    blstm_hidden: int = 32
    channels_3d: tuple = (16, 32, 32)
    fusion_channels: int = 64

    def __post_init__(self):
        if len(self.channels_2d) != 2:
            raise ValueError("the 2D branch uses exactly two conv+pool stages")

    def to_dict(self):
        return {"g": self.profile.g, "truncation": self.profile.truncation,
                "channels_2d": list(self.channels_2d),
                "blstm_hidden": self.blstm_hidden,
                "channels_3d": list(self.channels_3d),
                "fusion_channels": self.fusion_channels}

    @classmethod
    def from_dict(cls, d):
        return cls(profile=FieldProfile(g=d["g"], truncation=d["truncation"]),
                   channels_2d=tuple(d["channels_2d"]),
                   blstm_hidden=d["blstm_hidden"],
                   channels_3d=tuple(d["channels_3d"]),
                   fusion_channels=d["fusion_channels"])


@dataclass(frozen=True)
class LocalNetConfig:
    profile: FieldProfile = dc_field(default_factory=FieldProfile)
    encoder: tuple = (16, 32, 64)
    fc: tuple = (512, 512)
    decoder: tuple = (32, 16)
    guidance_channels: int = 8
    use_guidance: bool = True

    def __post_init__(self):
        p8 = self.profile.patch // 8
        if self.fc[-1] % (p8 ** 3) != 0:
            raise ValueError(
                f"last fc width {self.fc[-1]} must divide into a {p8}^3 volume")
        if len(self.encoder) != 3 or len(self.decoder) != 2:
            raise ValueError("encoder needs 3 stages and decoder 2 hidden stages")

    def to_dict(self):
        return {"g": self.profile.g, "truncation": self.profile.truncation,
                "encoder": list(self.encoder), "fc": list(self.fc),
                "decoder": list(self.decoder),
                "guidance_channels": self.guidance_channels,
                "use_guidance": self.use_guidance}

    @classmethod
    def from_dict(cls, d):
        return cls(profile=FieldProfile(g=d["g"], truncation=d["truncation"]),
                   encoder=tuple(d["encoder"]), fc=tuple(d["fc"]),
                   decoder=tuple(d["decoder"]),
                   guidance_channels=d["guidance_channels"],
                   use_guidance=d["use_guidance"])


@dataclass
class GuidanceCrops:
    """Windows of the coarse structure probability around a patch center:
    crop_a has side g/4 (feeds the encoder end through conv+pool), crop_b
    side g/8 (concatenated at the decoder start)."""
    crop_a: Tensor
    crop_b: Tensor


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _lstm_params(store, rng, prefix, n_in, hidden, dtype):
    def mk(name, shape):
        vals = rng.uniform(-0.08, 0.08, size=shape).astype(dtype)
        return store.add(f"{prefix}.{name}", Tensor(vals, requires_grad=True))

    w_in = mk("w_in", (4 * hidden, n_in))
    w_rec = mk("w_rec", (4 * hidden, hidden))
    bias_v = rng.uniform(-0.08, 0.08, size=(4 * hidden,)).astype(dtype)
    bias_v[hidden:2 * hidden] = 1.0  # forget gate opens at init
    bias = store.add(f"{prefix}.bias", Tensor(bias_v, requires_grad=True))
    return LSTMParams(w_in=w_in, w_rec=w_rec, bias=bias)


def _blstm_params(store, rng, prefix, n_in, hidden, dtype):
    return BLSTMParams(
        fwd=_lstm_params(store, rng, f"{prefix}.fwd", n_in, hidden, dtype),
        bwd=_lstm_params(store, rng, f"{prefix}.bwd", n_in, hidden, dtype))


def _conv_params(store, rng, prefix, shape, dtype, bias=True):
    fan_in = int(np.prod(shape[1:]))
    k = store.add(f"{prefix}.kernels",
                  Tensor(_he_uniform(rng, shape, fan_in, dtype), requires_grad=True))
    b = None
    if bias:
        b = store.add(f"{prefix}.bias",
                      Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True))
    return k, b


def _dense_params(store, rng, prefix, n_out, n_in, dtype):
    w = store.add(f"{prefix}.weights",
                  Tensor(_he_uniform(rng, (n_out, n_in), n_in, dtype), requires_grad=True))
    b = store.add(f"{prefix}.bias",
                  Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))
    return w, b


# ---------------------------------------------------------------------------
# 2D -> 3D assembly
# ---------------------------------------------------------------------------

# per face: (spatial permutation no, expansion axis): maps a face map
# (B, m, v, u) onto the voxel axes it projects to, then broadcasts along
# the projection axis.  Face order (+x, -x, +y, -y, +z, -z); face image
# rows are the v (higher) in-plane world axis, columns the u (lower) one.
_FACE_EXPAND_AXIS = (2, 2, 3, 3, 4, 4)


def assemble_2d_to_3d(face_maps):
    """Gather six (B, m, g, g) face maps into a (B, 6m, g, g, g) volume.

    Voxel (i, j, k) receives the concatenation of each face map at the
    voxel's orthographic projection: faces +/-x read (u, v) = (j, k),
    +/-y read (i, k), +/-z read (i, j).
    """
    if len(face_maps) != 6:
        raise ad.ShapeMismatchError(f"expected six face maps, got {len(face_maps)}")
    shape = face_maps[0].shape
    g = shape[2]
    if shape[2] != shape[3]:
        raise ad.ShapeMismatchError("face maps must be square")
    for m in face_maps[1:]:
        if m.shape != shape:
            raise ad.ShapeMismatchError("face maps must share one shape")
    blocks = []
    for f, fmap in enumerate(face_maps):
        # (B, m, v, u) -> (B, m, u, v): in-plane world axes in ascending order
        planar = ad.permute(fmap, (0, 1, 3, 2))
        blocks.append(ad.expand_axis(planar, _FACE_EXPAND_AXIS[f], g))
    return ad.concat(blocks, axis=1)


def face_lookup_table(g):
    """Reference (face, u-source, v-source) index map for every voxel,
    used to cross-check the gather independently of the ops above."""
    table = np.zeros((6, g, g, g, 2), dtype=np.int64)
    for i in range(g):
        for j in range(g):
            for k in range(g):
                table[0, i, j, k] = (j, k)
                table[1, i, j, k] = (j, k)
                table[2, i, j, k] = (i, k)
                table[3, i, j, k] = (i, k)
                table[4, i, j, k] = (i, j)
                table[5, i, j, k] = (i, j)
    return table


# ---------------------------------------------------------------------------
# global structure network
# ---------------------------------------------------------------------------

class GlobalNet:
    """Six-view 2D branch + volumetric branch fused by 1x1x1 convolutions
    into per-voxel two-class logits on the coarse grid.  The 2D branch
    weights are shared across the six faces."""

    PREFIX = "global"

    def __init__(self, cfg, store, seed=0, dtype=np.float32, init=True):
        self.cfg = cfg
        self.store = store
        if init:
            rng = np.random.default_rng(seed)
            c2a, c2b = cfg.channels_2d
            h = cfg.blstm_hidden
            p = self.PREFIX
            _conv_params(store, rng, f"{p}.conv2d_0", (c2a, 3, 3, 3), dtype)
            _conv_params(store, rng, f"{p}.conv2d_1", (c2b, c2a, 3, 3), dtype)
            _blstm_params(store, rng, f"{p}.renet_v", c2b, h, dtype)
            _blstm_params(store, rng, f"{p}.renet_h", 2 * h, h, dtype)
            c_in = 4
            for i, c in enumerate(cfg.channels_3d):
                _conv_params(store, rng, f"{p}.conv3d_{i}", (c, c_in, 3, 3, 3), dtype)
                c_in = c
            fused_in = 12 * h + cfg.channels_3d[-1]
            _conv_params(store, rng, f"{p}.fusion", (cfg.fusion_channels, fused_in, 1, 1, 1), dtype)
            _conv_params(store, rng, f"{p}.classifier", (2, cfg.fusion_channels, 1, 1, 1), dtype)

    def _param(self, name):
        return self.store[f"{self.PREFIX}.{name}"]

    def _blstm(self, name):
        def cell(d):
            return LSTMParams(w_in=self._param(f"{name}.{d}.w_in"),
                              w_rec=self._param(f"{name}.{d}.w_rec"),
                              bias=self._param(f"{name}.{d}.bias"))
        return BLSTMParams(fwd=cell("fwd"), bwd=cell("bwd"))

    def forward(self, images, coarse):
        """images: Tensor (6, 3, 4g, 4g); coarse: Tensor (1, 4, g, g, g).
        Returns per-voxel logits (1, 2, g, g, g)."""
        cfg = self.cfg
        g = cfg.profile.g
        if images.shape != (6, 3, 4 * g, 4 * g):
            raise ad.ShapeMismatchError(
                f"expected six {4 * g}^2 color images, got {tuple(images.shape)}")
        if coarse.shape != (1, 4, g, g, g):
            raise ad.ShapeMismatchError(
                f"expected a (1, 4, {g}^3) coarse field, got {tuple(coarse.shape)}")
        h = ad.max_pool(ad.relu(ad.conv2d(images, self._param("conv2d_0.kernels"),
                                          self._param("conv2d_0.bias"), pad=1)), 2)
        h = ad.max_pool(ad.relu(ad.conv2d(h, self._param("conv2d_1.kernels"),
                                          self._param("conv2d_1.bias"), pad=1)), 2)
        h = ad.renet_block(h, self._blstm("renet_v"), self._blstm("renet_h"),
                           cfg.blstm_hidden)
        faces = [ad.narrow(h, 0, f, 1) for f in range(6)]
        volume_2d = assemble_2d_to_3d(faces)

        v = coarse
        for i in range(len(cfg.channels_3d)):
            v = ad.relu(ad.conv3d(v, self._param(f"conv3d_{i}.kernels"),
                                  self._param(f"conv3d_{i}.bias"), pad=1))
        fused = ad.concat([volume_2d, v], axis=1)
        fused = ad.relu(ad.conv3d(fused, self._param("fusion.kernels"),
                                  self._param("fusion.bias")))
        return ad.conv3d(fused, self._param("classifier.kernels"),
                         self._param("classifier.bias"))

    def probability(self, images, coarse):
        """Inside-probability tensor (1, 1, g, g, g) on the active tape."""
        probs = ad.softmax(self.forward(images, coarse), axis=1)
        return ad.narrow(probs, 1, 1, 1)

    def infer(self, face_images, coarse_grid):
        """Numpy convenience forward: list of colored DepthImages + 4-channel
        coarse VolumeGrid -> inside-probability VolumeGrid (values in (0,1))."""
        images = stack_face_images(face_images)
        probs = self.probability(
            ad.constant(images), ad.constant(coarse_grid.values[None]))
        return VolumeGrid(values=probs.values[0].astype(np.float32),
                          origin=coarse_grid.origin.copy(),
                          voxel_size=coarse_grid.voxel_size)


def stack_face_images(face_images):
    """Six colored DepthImages -> (6, 3, R, R) float32 input block."""
    if len(face_images) != 6:
        raise ValueError(f"expected 6 face images, got {len(face_images)}")
    return np.stack([im.color.transpose(2, 0, 1) for im in face_images]).astype(np.float32)


# ---------------------------------------------------------------------------
# guidance crops
# ---------------------------------------------------------------------------

def _round_half_toward_zero(v):
    return np.ceil(np.asarray(v, dtype=np.float64) - 0.5).astype(np.int64)


def crop_guidance(structure, centers, profile):
    """Crop guidance windows from the coarse inside-probability volume.

    `structure` is a Tensor (1, 1, g, g, g) (gradients flow through the
    crops) or a plain array; `centers` are (B, 3) integer patch centers in
    fine-grid voxel coordinates.  The coarse center is round(center / 8)
    with ties toward zero; windows of side g/4 and g/8 are zero-padded at
    the borders.
    """
    g = profile.g
    if not isinstance(structure, Tensor):
        structure = ad.constant(np.asarray(structure, dtype=np.float32).reshape(1, g, g, g))
    vol = ad.reshape(structure, (1, g, g, g))
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    coarse = _round_half_toward_zero(centers / 8.0)
    side_a, side_b = g // 4, g // 8
    crop_a = ad.gather_patches(vol, coarse - side_a // 2, side_a)
    crop_b = ad.gather_patches(vol, coarse - side_b // 2, side_b)
    return GuidanceCrops(crop_a=crop_a, crop_b=crop_b)


# ---------------------------------------------------------------------------
# local refinement network
# ---------------------------------------------------------------------------

class LocalNet:
    """Volumetric encoder-decoder over boundary patches with optional
    structure guidance injected at the encoder end and decoder start."""

    PREFIX = "local"

    def __init__(self, cfg, store, seed=0, dtype=np.float32, init=True):
        self.cfg = cfg
        self.store = store
        if init:
            rng = np.random.default_rng(seed)
            p = self.PREFIX
            c_in = 4
            for i, c in enumerate(cfg.encoder):
                _conv_params(store, rng, f"{p}.enc_{i}", (c, c_in, 3, 3, 3), dtype)
                c_in = c
            p8 = cfg.profile.patch // 8
            bottleneck = cfg.encoder[-1]
            if cfg.use_guidance:
                _conv_params(store, rng, f"{p}.guide",
                             (cfg.guidance_channels, 1, 3, 3, 3), dtype)
                bottleneck += cfg.guidance_channels
            flat = bottleneck * p8 ** 3
            _dense_params(store, rng, f"{p}.fc_0", cfg.fc[0], flat, dtype)
            _dense_params(store, rng, f"{p}.fc_1", cfg.fc[1], cfg.fc[0], dtype)
            dec_in = cfg.fc[1] // p8 ** 3
            if cfg.use_guidance:
                dec_in += 1
            chain = list(cfg.decoder) + [2]
            for i, c in enumerate(chain):
                fan_in = dec_in * 4 ** 3
                store.add(f"{p}.dec_{i}.kernels",
                          Tensor(_he_uniform(rng, (dec_in, c, 4, 4, 4), fan_in, dtype),
                                 requires_grad=True))
                store.add(f"{p}.dec_{i}.bias",
                          Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
                dec_in = c

    def _param(self, name):
        return self.store[f"{self.PREFIX}.{name}"]

    def forward(self, patches, crops=None):
        """patches: Tensor (B, 4, p, p, p); crops: GuidanceCrops or None.
        Returns per-voxel logits (B, 2, p, p, p)."""
        cfg = self.cfg
        p_side = cfg.profile.patch
        if patches.shape[1:] != (4, p_side, p_side, p_side):
            raise ad.ShapeMismatchError(
                f"expected (B, 4, {p_side}^3) patches, got {tuple(patches.shape)}")
        if cfg.use_guidance and crops is None:
            raise ad.ShapeMismatchError("this network was built with guidance crops")
        batch = patches.shape[0]
        h = patches
        for i in range(len(cfg.encoder)):
            h = ad.max_pool(ad.relu(ad.conv3d(h, self._param(f"enc_{i}.kernels"),
                                              self._param(f"enc_{i}.bias"), pad=1)), 2)
        if cfg.use_guidance:
            ga = ad.max_pool(ad.relu(ad.conv3d(crops.crop_a, self._param("guide.kernels"),
                                               self._param("guide.bias"), pad=1)), 2)
            if ga.shape[0] != batch:
                raise ad.ShapeMismatchError(
                    f"guidance batch {ga.shape[0]} != patch batch {batch}")
            h = ad.concat([h, ga], axis=1)
        p8 = p_side // 8
        h = ad.reshape(h, (batch, h.shape[1] * p8 ** 3))
        h = ad.relu(ad.dense(h, self._param("fc_0.weights"), self._param("fc_0.bias")))
        h = ad.relu(ad.dense(h, self._param("fc_1.weights"), self._param("fc_1.bias")))
        h = ad.reshape(h, (batch, self.cfg.fc[1] // p8 ** 3, p8, p8, p8))
        if cfg.use_guidance:
            h = ad.concat([h, crops.crop_b], axis=1)
        n_dec = len(cfg.decoder) + 1
        for i in range(n_dec):
            h = ad.bias_add(ad.deconv3d(h, self._param(f"dec_{i}.kernels"), stride=2),
                            self._param(f"dec_{i}.bias"))
            if i < n_dec - 1:
                h = ad.relu(h)
        return h

    def probability(self, patches, crops=None):
        probs = ad.softmax(self.forward(patches, crops), axis=1)
        return ad.narrow(probs, 1, 1, 1)


# ---------------------------------------------------------------------------
# inference bundle (used by the completion loop)
# ---------------------------------------------------------------------------

class NetworkBundle:
    """Numpy-facing pair of trained networks with batch chunking."""

    def __init__(self, global_net, local_net, chunk=64):
        self.global_net = global_net
        self.local_net = local_net
        self.chunk = chunk

    @property
    def profile(self):
        return self.global_net.cfg.profile

    def global_probability(self, face_images, coarse_grid):
        return self.global_net.infer(face_images, coarse_grid)

    def local_probability(self, patches, structure, centers):
        """patches: (B, 4, p^3) array; structure: coarse probability grid;
        centers: (B, 3) fine-voxel patch centers -> (B, p^3) probabilities."""
        profile = self.local_net.cfg.profile
        out = []
        s_vals = structure.values if isinstance(structure, VolumeGrid) else structure
        for lo in range(0, patches.shape[0], self.chunk):
            sub = slice(lo, lo + self.chunk)
            crops = None
            if self.local_net.cfg.use_guidance:
                crops = crop_guidance(ad.constant(s_vals), centers[sub], profile)
            probs = self.local_net.probability(
                ad.constant(patches[sub].astype(np.float32)), crops)
            out.append(probs.values[:, 0])
        return np.concatenate(out, axis=0)


def save_models(path, store, global_cfg, local_cfg=None, auc_coeffs=None,
                auc_fit_error=None, extra=None):
    meta = {"global_cfg": global_cfg.to_dict(),
            "local_cfg": local_cfg.to_dict() if local_cfg else None,
            "auc_fit_error": auc_fit_error}
    meta.update(extra or {})
    return ad.save_checkpoint(path, store, auc_coeffs=auc_coeffs, extra=meta)


def load_models(path):
    """Checkpoint -> (store, GlobalNet, LocalNet or None, manifest)."""
    store, manifest = ad.load_checkpoint(path)
    gcfg = GlobalNetConfig.from_dict(manifest["extra"]["global_cfg"])
    gnet = GlobalNet(gcfg, store, init=False)
    lnet = None
    if manifest["extra"].get("local_cfg"):
        lcfg = LocalNetConfig.from_dict(manifest["extra"]["local_cfg"])
        lnet = LocalNet(lcfg, store, init=False)
    return store, gnet, lnet, manifest
