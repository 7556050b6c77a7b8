"""Convolutional visuomotor policy, behavior-cloning trainer, and Grad-CAM.

The policy maps a wrist-camera image straight to a 6-DoF delta-pose action.
Two sibling architectures ship: "a" (the attacked model) and "b" (an
independently trained target for black-box transfer checks); "toy" is a
2-channel micro-variant kept for closed-form saliency verification.

Forward passes exist twice on purpose: a plain numpy path for rollouts and
a graph path for training and the attack. Both run the same kernels in the
same order, so their outputs agree bit-for-bit.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor

# arch name -> ((conv1_out, k1), (conv2_out, k2), mlp hidden width)
ARCHS = {
    "a": ((8, 5), (16, 5), 64),
    "b": ((12, 3), (12, 3), 64),
    "toy": ((2, 3), (2, 3), 4),
}
CONV_STRIDE = 2
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass
class PolicyNet:
    arch: str
    resolution: int
    params: dict  # name -> float64 ndarray

    def feature_shape(self):
        """(C, H', W') of the post-ReLU backbone output A."""
        (c1, k1), (c2, k2), _ = ARCHS[self.arch]
        s1 = (self.resolution - k1) // CONV_STRIDE + 1
        s2 = (s1 - k2) // CONV_STRIDE + 1
        return c2, s2, s2


def init_policy(arch, resolution, seed):
    """He-initialized network; the action head starts near zero."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture: {arch!r}")
    (c1, k1), (c2, k2), hidden = ARCHS[arch]
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    net = PolicyNet(arch=arch, resolution=resolution, params={})
    p = net.params
    p["conv1_w"] = he((c1, 3, k1, k1), 3 * k1 * k1)
    p["conv1_b"] = np.zeros(c1)
    p["conv2_w"] = he((c2, c1, k2, k2), c1 * k2 * k2)
    p["conv2_b"] = np.zeros(c2)
    c, fh, fw = net.feature_shape()
    flat = c * fh * fw
    p["fc1_w"] = he((flat, hidden), flat)
    p["fc1_b"] = np.zeros(hidden)
    p["fc2_w"] = 0.01 * he((hidden, 6), hidden)
    p["fc2_b"] = np.zeros(6)
    return net


# -- forward passes ----------------------------------------------------------


def _image_batch(images):
    """(N, H, W, 3) -> contiguous (N, 3, H, W), matching the graph layout."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2))


def forward_np(net, image):
    """Fast inference: (H, W, 3) image -> (6,) action, no graph."""
    p = net.params
    x = _image_batch(image[None])
    h = np.maximum(_kernels.conv2d_forward(x, p["conv1_w"], p["conv1_b"], CONV_STRIDE), 0.0)
    a4 = np.maximum(_kernels.conv2d_forward(h, p["conv2_w"], p["conv2_b"], CONV_STRIDE), 0.0)
    flat = a4.reshape(1, -1)
    h1 = np.maximum(flat @ p["fc1_w"] + p["fc1_b"][None, :], 0.0)
    out = h1 @ p["fc2_w"] + p["fc2_b"][None, :]
    return out[0]


def act(net, image):
    """Deterministic policy query with the configured resolution enforced."""
    image = np.asarray(image, dtype=np.float64)
    expect = (net.resolution, net.resolution, 3)
    if image.shape != expect:
        raise ValueError(f"image shape {image.shape} does not match policy input {expect}")
    return geo.Action6.from_vec(forward_np(net, image))


def _batch_graph(params_t, xb):
    """Graph forward on an (N, 3, H, W) batch tensor -> (N, 6) predictions."""
    h = ad.relu(ad.conv2d(xb, params_t["conv1_w"], params_t["conv1_b"], CONV_STRIDE))
    a4 = ad.relu(ad.conv2d(h, params_t["conv2_w"], params_t["conv2_b"], CONV_STRIDE))
    n = a4.shape[0]
    flat = ad.reshape(a4, (n, -1))
    h1 = ad.relu(ad.bias_add_rows(ad.matmul(flat, params_t["fc1_w"]), params_t["fc1_b"]))
    return ad.bias_add_rows(ad.matmul(h1, params_t["fc2_w"]), params_t["fc2_b"])


def policy_graph(net, image_t, params_t=None):
    """Graph forward for one (H, W, 3) image tensor.

    Returns (action (6,), A (C, H', W'), A4 (1, C, H', W')): A is the
    post-ReLU backbone output used by Grad-CAM; A4 is the same node before
    the reshape, whose .grad carries d(target)/dA after a backward pass.
    """
    if params_t is None:
        params_t = {k: Tensor(v) for k, v in net.params.items()}
    x = ad.reshape(ad.permute(image_t, (2, 0, 1)), (1, 3) + image_t.shape[:2])
    h = ad.relu(ad.conv2d(x, params_t["conv1_w"], params_t["conv1_b"], CONV_STRIDE))
    a4 = ad.relu(ad.conv2d(h, params_t["conv2_w"], params_t["conv2_b"], CONV_STRIDE))
    feat = ad.reshape(a4, a4.shape[1:])
    flat = ad.reshape(a4, (1, -1))
    h1 = ad.relu(ad.bias_add_rows(ad.matmul(flat, params_t["fc1_w"]), params_t["fc1_b"]))
    out = ad.bias_add_rows(ad.matmul(h1, params_t["fc2_w"]), params_t["fc2_b"])
    return ad.reshape(out, (6,)), feat, a4


# -- grad-cam ----------------------------------------------------------------


def channel_weights(action_t, a4_t):
    """Grad-CAM channel weights: spatial mean of d||a||/dA_k.

    Runs one backward pass on the action norm and clears the graph again,
    so the caller's later backward passes start from clean gradients.
    Returns None when the action norm is (numerically) zero, where the
    weights are undefined.
    """
    n = ad.l2norm(action_t)
    if not n.requires_grad or n.item() < 1e-300:
        return None
    n.backward()
    w_k = a4_t.grad[0].mean(axis=(1, 2))
    n.zero_subgraph()
    return w_k


def saliency_graph(action_t, feat_t, a4_t, out_hw, w_k=None):
    """Grad-CAM map as a graph node: S = upsample(ReLU(sum_k w_k A_k)).

    w_k is frozen (no second-order terms), so the returned map is
    differentiable with respect to the image through A only. By default the
    weights come from a fresh channel_weights() pass; passing w_k explicitly
    reuses weights from a reference observation, which keeps the freezing
    convention identical across paired evaluations (finite differences,
    benign/attacked comparisons). A zero-norm action makes the weights
    undefined; S is all-zero then.
    """
    if w_k is None:
        w_k = channel_weights(action_t, a4_t)
    if w_k is None:
        return Tensor(np.zeros(out_hw))
    s = ad.relu(ad.channel_mix(feat_t, w_k))
    return ad.bilinear_upsample2d(s, out_hw[0], out_hw[1])


def gradcam(net, image):
    """Saliency map of the action norm at image resolution, values >= 0."""
    image = np.asarray(image, dtype=np.float64)
    image_t = Tensor(image, requires_grad=True)
    action_t, feat_t, a4_t = policy_graph(net, image_t)
    s = saliency_graph(action_t, feat_t, a4_t, image.shape[:2])
    return s.data


# -- scripted expert and demonstrations --------------------------------------


def scripted_expert(state, goal, k_p=0.8, step_max=geo.STEP_MAX, rot_max=geo.ROT_MAX):
    """Proportional servo toward the goal point, expressed in the EE frame.

    Translation steps toward the goal with gain k_p (norm-clamped); rotation
    turns the approach axis toward the goal by at most rot_max per step.
    """
    delta = np.asarray(goal, dtype=np.float64) - state.p
    dist = float(np.linalg.norm(delta))
    if dist < 1e-12:
        return np.zeros(6)
    dp = state.R.T @ (k_p * delta)
    n = float(np.linalg.norm(dp))
    if n > step_max:
        dp *= step_max / n
    u = state.R.T @ (delta / dist)  # goal direction in the EE frame
    # rotation from the approach axis (0,0,-1) toward u
    cross = np.array([u[1], -u[0], 0.0])
    s = float(np.linalg.norm(cross))
    c = -u[2]
    angle = float(np.arctan2(s, c))
    if s < 1e-12:
        drot = np.array([min(angle, rot_max), 0.0, 0.0]) if c < 0.0 else np.zeros(3)
    else:
        drot = cross / s * min(angle, rot_max)
    return np.concatenate([dp, drot])


def collect_demos(
    n_episodes,
    seed,
    objects,
    intr,
    textures,
    workspace=None,
    r_range=(0.25, 0.8),
    horizon=60,
    d_success=0.05,
    explore_prob=0.25,
    k_p=0.8,
):
    """Expert rollouts rendered through the wrist camera.

    Returns (images (N, H, W, 3), actions (N, 6)). Labels are always the
    expert action for the current image; with probability explore_prob a
    perturbed action is *executed* instead, so the dataset also covers
    slightly off-policy states.
    """
    from . import render as rd  # local import: render already imports geometry

    workspace = workspace or geo.Workspace()
    rng = np.random.default_rng(seed)
    images, actions = [], []
    for ep in range(n_episodes):
        cfg = geo.sample_scene(
            int(rng.integers(2**31)), float(rng.uniform(*r_range)), workspace, config_id=ep
        )
        scene = rd.build_scene(objects, cfg)
        goal = rd.goal_center(objects, cfg)
        ee = geo.to_pose(cfg.ee_init, rd.adv_center(objects, cfg))
        for _ in range(horizon):
            img = rd.rasterize(scene, ee, intr, textures).image
            a = scripted_expert(ee, goal, k_p=k_p)
            images.append(img)
            actions.append(a)
            if rng.uniform() < explore_prob:
                a = a + rng.normal(0.0, [0.008] * 3 + [0.04] * 3)
            ee = geo.apply_action(ee, a)
            if np.linalg.norm(ee.p - goal) < d_success:
                break
    return np.stack(images), np.stack(actions)


# -- behavior cloning --------------------------------------------------------


def train_bc(
    dataset,
    epochs,
    lr,
    seed,
    arch="a",
    resolution=64,
    batch_size=32,
    net=None,
):
    """Mini-batch Adam on mean squared action error.

    dataset is (images (N, H, W, 3), actions (N, 6)). Returns the trained
    net and the per-epoch loss history; fully deterministic given seed.
    """
    images, actions = dataset
    n = len(images)
    if n == 0:
        raise ValueError("empty behavior-cloning dataset")
    rng = np.random.default_rng(seed)
    if net is None:
        net = init_policy(arch, resolution, int(rng.integers(2**31)))
    x_all = _image_batch(images)
    y_all = np.asarray(actions, dtype=np.float64)

    params_t = {k: Tensor(v.copy(), requires_grad=True) for k, v in net.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(v.data) for k, v in params_t.items()}
    v = {k: np.zeros_like(t.data) for k, t in params_t.items()}
    step = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            pred = _batch_graph(params_t, Tensor(x_all[idx]))
            d = ad.sub(pred, Tensor(y_all[idx]))
            loss = ad.tmean(ad.mul(d, d))
            loss.backward()
            step += 1
            for k, t in params_t.items():
                g = t.grad
                m[k] = beta1 * m[k] + (1.0 - beta1) * g
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
                mh = m[k] / (1.0 - beta1**step)
                vh = v[k] / (1.0 - beta2**step)
                t.data -= lr * mh / (np.sqrt(vh) + eps)
            loss.zero_subgraph()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
    trained = PolicyNet(
        arch=net.arch,
        resolution=net.resolution,
        params={k: t.data.copy() for k, t in params_t.items()},
    )
    return trained, history


# -- checkpoint i/o ----------------------------------------------------------

_MAGIC = b"ADVPOL01"


def save_policy(net, path):
    """Versioned binary checkpoint: magic, arch id, resolution, shape table,
    then little-endian float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        arch = net.arch.encode()
        fh.write(struct.pack("<B", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<II", net.resolution, len(net.params)))
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(net.params[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<B", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_policy(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"not a policy checkpoint: {path}")
        (alen,) = struct.unpack("<B", fh.read(1))
        arch = fh.read(alen).decode()
        if arch not in ARCHS:
            raise ValueError(f"checkpoint uses unknown architecture {arch!r}")
        resolution, n_params = struct.unpack("<II", fh.read(8))
        params = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack("<B", fh.read(1))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = data.astype(np.float64)
    return PolicyNet(arch=arch, resolution=resolution, params=params)
