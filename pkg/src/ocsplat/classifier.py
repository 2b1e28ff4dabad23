"""Per-pixel uncertainty and clean-mask heads.

Both heads are small rectifier MLPs (input -> 64 -> 64 -> 1) trained with
Adam on their own losses.  Gradients are written out by hand; nothing here
touches scene primitives.
"""

from __future__ import annotations

import numpy as np

POS_FREQS = 8
ID_DIM = 8
LOCAL_WINDOW = 9
BETA_MIN = 0.05
HIDDEN = (64, 64)


def softplus(x):
    return np.logaddexp(0.0, x)


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# features


def positional_encoding(width: int) -> np.ndarray:
    """(width, 2*POS_FREQS) sin/cos encoding of x / (width - 1)."""
    s = np.arange(width, dtype=np.float64) / (width - 1)
    ang = np.pi * s[:, None] * (2.0 ** np.arange(POS_FREQS))[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def photometric_features(image) -> np.ndarray:
    """(width, 9): color, windowed mean and windowed std (edge padded)."""
    img = np.asarray(image, dtype=np.float64)
    half = LOCAL_WINDOW // 2
    pad = np.pad(img, ((half, half), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, LOCAL_WINDOW, axis=0)  # (W, 3, window)
    return np.concatenate([img, win.mean(axis=2), win.std(axis=2)], axis=1)


def view_features(image) -> np.ndarray:
    """Static per-pixel features of one view: positional + photometric."""
    return np.concatenate([positional_encoding(len(image)), photometric_features(image)], axis=1)


def feature_scaler(static_views) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and std of static features pooled over views.

    Raw columns differ in scale by two orders of magnitude (window std vs
    positional encoding), which stalls the heads; both consume standardized
    inputs.
    """
    x = np.concatenate([np.asarray(v, dtype=np.float64) for v in static_views], axis=0)
    sd = x.std(axis=0)
    return x.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)


def standardize(static, scaler) -> np.ndarray:
    mean, sd = scaler
    return (np.asarray(static, dtype=np.float64) - mean) / sd


def extract_features(image, pixel: int, image_id: int, id_table) -> dict:
    feats = view_features(image)[pixel]
    return {
        "f_pos": feats[: 2 * POS_FREQS],
        "f_id": np.asarray(id_table)[image_id].copy(),
        "f_c": feats[2 * POS_FREQS:],
    }


# ---------------------------------------------------------------------------
# network


class MLP:
    """Fully connected rectifier network with a linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, weights=None):
        self.sizes = tuple(int(s) for s in sizes)
        if weights is not None:
            self.params = [np.array(p, dtype=np.float64) for p in weights]
            return
        rng = rng or np.random.default_rng(0)
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        # small output layer keeps the initial heads near their neutral point
        self.params[-2] *= 0.1

    def forward(self, x):
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        """Parameter gradients and the gradient w.r.t. the input."""
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        n_layers = len(self.params) // 2
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "shapes": [list(p.shape) for p in self.params],
            "params": [p.ravel().tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        ws = [np.array(flat, dtype=np.float64).reshape(shape) for flat, shape in zip(d["params"], d["shapes"])]
        return cls(d["sizes"], weights=ws)


class Adam:
    """Adam over a list of arrays, updated in place.

    ``rows`` restricts an update to a subset of leading-axis rows; the other
    rows keep both their values and their moments.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr if np.ndim(lr) else [lr] * len(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = [np.zeros(p.shape[:1], dtype=np.int64) if p.ndim else np.zeros((), np.int64) for p in params]

    def step(self, params, grads, rows=None):
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            sel = slice(None) if rows is None else rows
            m = self.m[i][sel]
            v = self.v[i][sel]
            t = self.t[i][sel] + 1
            m = self.b1 * m + (1 - self.b1) * g[sel]
            v = self.b2 * v + (1 - self.b2) * g[sel] ** 2
            tt = t.reshape(t.shape + (1,) * (m.ndim - t.ndim)).astype(np.float64)
            m_hat = m / (1 - self.b1**tt)
            v_hat = v / (1 - self.b2**tt)
            p[sel] -= self.lr[i] * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[i][sel] = m
            self.v[i][sel] = v
            self.t[i][sel] = t

    def take_rows(self, index):
        """Moments for a reindexed row set; new rows (index -1) start at zero."""
        index = np.asarray(index)
        fresh = index < 0
        safe = np.where(fresh, 0, index)
        for lst in (self.m, self.v, self.t):
            for i, a in enumerate(lst):
                b = a[safe].copy()
                b[fresh] = 0
                lst[i] = b

    def state_dict(self) -> dict:
        return {
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
            "t": [a.tolist() for a in self.t],
        }

    def load_state_dict(self, d: dict) -> None:
        self.m = [np.array(a, dtype=np.float64).reshape(ref.shape) for a, ref in zip(d["m"], self.m)]
        self.v = [np.array(a, dtype=np.float64).reshape(ref.shape) for a, ref in zip(d["v"], self.v)]
        self.t = [np.array(a, dtype=np.int64).reshape(ref.shape) for a, ref in zip(d["t"], self.t)]


def optimizer_step(params, grads, adam: Adam):
    adam.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# heads


class UncertaintyHead:
    """beta = softplus(MLP(f_pos, f_id, f_c)) + BETA_MIN."""

    def __init__(self, n_static: int, n_images: int, rng: np.random.Generator):
        self.mlp = MLP((n_static + ID_DIM, *HIDDEN, 1), rng)
        self.id_table = rng.normal(0.0, 0.1, (n_images, ID_DIM))

    @property
    def params(self):
        return [*self.mlp.params, self.id_table]

    def inputs(self, static, image_id: int):
        ids = np.broadcast_to(self.id_table[image_id], (len(static), ID_DIM))
        return np.concatenate([static, ids], axis=1)

    def predict(self, static, image_id: int):
        raw, acts = self.mlp.forward(self.inputs(static, image_id))
        return softplus(raw[:, 0]) + BETA_MIN, (raw[:, 0], acts)

    def loss_and_grads(self, static, image_id: int, loss_map):
        beta, (raw, acts) = self.predict(static, image_id)
        loss, d_beta = uncertainty_loss(loss_map, beta)
        d_raw = d_beta * logistic(raw)
        grads, g_in = self.mlp.backward(acts, d_raw[:, None])
        g_id = np.zeros_like(self.id_table)
        g_id[image_id] = g_in[:, static.shape[1]:].sum(axis=0)
        return loss, [*grads, g_id], beta


class MaskHead:
    """M_c = logistic(MLP(f_pos, beta, f_c)); beta enters as a detached input.

    The normalized beta in [0, 1] is recentred to [-2, 2] so it sits on the
    same scale as the standardized static features.
    """

    beta_gain = 4.0

    def __init__(self, n_static: int, rng: np.random.Generator):
        self.mlp = MLP((n_static + 1, *HIDDEN, 1), rng)

    @property
    def params(self):
        return self.mlp.params

    def predict(self, static, beta_input):
        b = self.beta_gain * (np.asarray(beta_input, dtype=np.float64) - 0.5)
        x = np.concatenate([static, b[:, None]], axis=1)
        raw, acts = self.mlp.forward(x)
        return logistic(raw[:, 0]), (raw[:, 0], acts)

    def loss_and_grads(self, static, beta_input, m_self, m_u):
        mc, (raw, acts) = self.predict(static, beta_input)
        loss, d_mc = supervision_loss(mc, m_self, m_u)
        d_raw = d_mc * mc * (1.0 - mc)
        grads, _ = self.mlp.backward(acts, d_raw[:, None])
        return loss, grads, mc


def predict_beta(head: UncertaintyHead, static, image_id: int):
    return head.predict(static, image_id)[0]


def predict_mask(head: MaskHead, static, beta_input):
    return head.predict(static, beta_input)[0]


def uncertainty_loss(loss_map, beta):
    """Mean of L / (2 beta^2) + log beta, and its gradient w.r.t. beta."""
    L = np.asarray(loss_map, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    n = L.size
    loss = float(np.mean(L / (2.0 * b * b) + np.log(b)))
    return loss, (-L / b**3 + 1.0 / b) / n


def supervision_loss(mc, m_self, m_u):
    """Mean over supervised pixels of |M_c - M_self|; zero if none are supervised."""
    mc = np.asarray(mc, dtype=np.float64)
    active = np.asarray(m_u, dtype=bool)
    n = int(active.sum())
    if n == 0:
        return 0.0, np.zeros_like(mc)
    diff = mc - np.asarray(m_self, dtype=np.float64)
    loss = float(np.abs(diff[active]).sum() / n)
    return loss, np.where(active, np.sign(diff), 0.0) / n
