"""Dense networks with hand-written backprop, Adam, and a squashed-Gaussian policy head.

Only the fixed topologies the training stack needs: fully-connected layers with
a scalar activation, optionally stacked into an ensemble along a leading axis
so that a whole critic ensemble runs as one batched matmul. 64-bit arithmetic
is the default so gradients can be checked against finite differences; training
code may opt into 32-bit.
"""

import io
import json

import numpy as np

from .errors import ShapeError, StateError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(z.dtype)),
    "tanh": (lambda z: np.tanh(z), lambda z: 1.0 - np.tanh(z) ** 2),
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
}

CHECKPOINT_VERSION = 1


class DenseNet:
    """Fully-connected net, optionally an ensemble of `members` identical topologies.

    Weights of layer l have shape (din, dout), or (members, din, dout) when
    `members` is not None. Two nets constructed from the same seed (and same
    shape arguments) are parameter-identical.
    """

    def __init__(self, widths, seed, activation="relu", members=None,
                 dtype=np.float64, final_scale=1.0):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"need >= 2 positive layer widths, got {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.members = None if members is None else int(members)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = []
        n_layers = len(widths) - 1
        for l in range(n_layers):
            din, dout = widths[l], widths[l + 1]
            lim = np.sqrt(6.0 / (din + dout))
            if l == n_layers - 1:
                lim *= final_scale
            shape = (din, dout) if self.members is None else (self.members, din, dout)
            w = rng.uniform(-lim, lim, size=shape).astype(self.dtype)
            bshape = (dout,) if self.members is None else (self.members, 1, dout)
            b = np.zeros(bshape, dtype=self.dtype)
            self.params.append(w)
            self.params.append(b)
        self._cache = None

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"input dim {x.shape[-1]} != net input dim {self.widths[0]}")
        if self.members is not None and x.ndim not in (2, 3):
            raise ShapeError(f"ensemble input must be 2-D or 3-D, got {x.ndim}-D")
        return x

    def forward(self, x, train=False):
        """Run the net. With `members`, a 2-D input is broadcast to every member.

        Returns (B, dout), or (members, B, dout) for ensembles. When train=True
        the activations are cached for a subsequent backward().
        """
        x = self._check_input(x)
        act, _ = _ACTIVATIONS[self.activation]
        h = x
        inputs, preacts = [], []
        for l in range(self.n_layers):
            w, b = self.params[2 * l], self.params[2 * l + 1]
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = act(z) if l < self.n_layers - 1 else z
        if train:
            self._cache = (inputs, preacts)
        return h

    def backward(self, dout):
        """Backprop a loss gradient at the outputs through the cached forward.

        Returns (grads, dx): grads aligned with self.params; dx is the gradient
        at the inputs, per member for ensembles (shape (members, B, din)) even
        when the forward input was a shared 2-D batch.
        """
        if self._cache is None:
            raise StateError("backward() without a train=True forward()")
        inputs, preacts = self._cache
        self._cache = None
        _, dact = _ACTIVATIONS[self.activation]
        grads = [None] * len(self.params)
        delta = np.asarray(dout, dtype=self.dtype)
        for l in range(self.n_layers - 1, -1, -1):
            if l < self.n_layers - 1:
                delta = delta * dact(preacts[l])
            w = self.params[2 * l]
            h_in = inputs[l]
            if self.members is None:
                grads[2 * l] = h_in.T @ delta
                grads[2 * l + 1] = delta.sum(axis=0)
                delta = delta @ w.T
            else:
                if h_in.ndim == 2:
                    grads[2 * l] = np.einsum("bi,nbo->nio", h_in, delta)
                else:
                    grads[2 * l] = np.swapaxes(h_in, -1, -2) @ delta
                grads[2 * l + 1] = delta.sum(axis=1, keepdims=True)
                delta = delta @ np.swapaxes(w, -1, -2)
        return grads, delta

    def forward_subset(self, x, member_idx):
        """Forward only the given ensemble members (no caching)."""
        if self.members is None:
            raise StateError("forward_subset needs an ensemble net")
        x = self._check_input(x)
        act, _ = _ACTIVATIONS[self.activation]
        h = x
        for l in range(self.n_layers):
            w = self.params[2 * l][member_idx]
            b = self.params[2 * l + 1][member_idx]
            z = h @ w + b
            h = act(z) if l < self.n_layers - 1 else z
        return h

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=self.dtype)
        if flat.size != self.n_params:
            raise ShapeError(f"flat size {flat.size} != n_params {self.n_params}")
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def clone(self):
        other = DenseNet(self.widths, seed=self.seed, activation=self.activation,
                         members=self.members, dtype=self.dtype)
        for p, q in zip(other.params, self.params):
            p[...] = q
        return other


class Adam:
    """Adam optimizer state for one parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        """Apply one Adam update in place. Returns False (and changes nothing)
        if any gradient entry is non-finite."""
        if len(grads) != len(self.m):
            raise ShapeError("gradient list length mismatch")
        for g, m in zip(grads, self.m):
            if g.shape != m.shape:
                raise ShapeError(f"gradient shape {g.shape} != state shape {m.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads):
            return False
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return True


def softplus(x):
    return np.logaddexp(0.0, x)


class SquashedGaussianPolicy:
    """Tanh-squashed Gaussian actor: net(obs) -> (mean, log_std), action in (-1, 1).

    log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX] so sampled log-probabilities
    stay finite. The squashing correction uses the numerically stable identity
    log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x)).
    """

    def __init__(self, obs_dim, action_dim, hidden=(256, 256), seed=0,
                 dtype=np.float64):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        widths = (obs_dim,) + tuple(hidden) + (2 * action_dim,)
        self.net = DenseNet(widths, seed=seed, dtype=dtype, final_scale=0.01)
        self.dtype = np.dtype(dtype)

    def _split(self, out):
        mean = out[..., :self.action_dim]
        log_std = np.clip(out[..., self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, obs, rng, train=False):
        """Sample actions with reparameterized noise. Returns (a, logp, cache).

        Pass train=True to keep the cache needed by backward_objective. The
        noise eps can be replayed through sample_with_noise for deterministic
        gradient checks.
        """
        obs = np.asarray(obs, dtype=self.dtype)
        eps = rng.standard_normal((obs.shape[0], self.action_dim)).astype(self.dtype)
        return self.sample_with_noise(obs, eps, train=train)

    def sample_with_noise(self, obs, eps, train=False):
        out = self.net.forward(obs, train=train)
        mean, log_std = self._split(out)
        std = np.exp(log_std)
        pre = mean + std * eps
        a = np.tanh(pre)
        # log N(pre; mean, std) - sum_j log(1 - tanh(pre_j)^2)
        log_gauss = (-0.5 * np.sum(eps ** 2, axis=-1)
                     - np.sum(log_std, axis=-1)
                     - 0.5 * self.action_dim * np.log(2.0 * np.pi))
        corr = np.sum(2.0 * (np.log(2.0) - pre - softplus(-2.0 * pre)), axis=-1)
        logp = log_gauss - corr
        cache = None
        if train:
            raw_log_std = out[..., self.action_dim:]
            cache = (eps, pre, std, raw_log_std)
        return a, logp, cache

    def backward_objective(self, cache, d_a, d_logp):
        """Backprop dL/da and dL/dlogp through squashing into net parameter grads."""
        if cache is None:
            raise StateError("backward_objective() needs a train=True sample")
        eps, pre, std, raw_log_std = cache
        # d logp / d pre (through the squash correction only)
        dlogp_dpre = 2.0 - 4.0 / (1.0 + np.exp(-2.0 * pre))
        da_dpre = 1.0 - np.tanh(pre) ** 2
        d_pre = d_a * da_dpre + d_logp[..., None] * dlogp_dpre
        d_mean = d_pre
        # pre = mean + exp(log_std) * eps; logp has a direct -log_std term
        d_log_std = d_pre * std * eps - d_logp[..., None]
        clip_mask = ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
        d_log_std = d_log_std * clip_mask
        d_out = np.concatenate([d_mean, d_log_std], axis=-1)
        grads, d_obs = self.net.backward(d_out)
        return grads, d_obs

    def mean_action(self, obs):
        """Deterministic action: tanh of the mean head."""
        out = self.net.forward(np.asarray(obs, dtype=self.dtype))
        mean, _ = self._split(out)
        return np.tanh(mean)

    def log_prob_stats(self, obs, rng):
        _, logp, _ = self.sample(obs, rng)
        return logp


def _meta_for(net):
    return {
        "widths": list(net.widths),
        "activation": net.activation,
        "members": net.members,
        "dtype": net.dtype.name,
        "seed": None,  # seeds are not needed to restore exact parameters
    }


def save_checkpoint(path, nets, adams=None, rng=None, extra=None, arrays=None):
    """Write a versioned checkpoint of named nets (+ optional Adam/RNG state).

    Parameters are stored flattened in C (row-major) order as little-endian
    floats; everything round-trips value-exact. `arrays` is a dict of extra
    named numpy arrays stored verbatim.
    """
    adams = adams or {}
    payload = {"__version__": np.int64(CHECKPOINT_VERSION)}
    meta = {"nets": {}, "adams": {}, "extra": extra or {}}
    for name, arr in (arrays or {}).items():
        payload[f"arr.{name}"] = np.asarray(arr)
    for name, net in nets.items():
        meta["nets"][name] = _meta_for(net)
        flat = net.get_flat()
        payload[f"net.{name}.params"] = flat.astype(flat.dtype.newbyteorder("<"))
    for name, adam in adams.items():
        meta["adams"][name] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t,
        }
        m = np.concatenate([a.ravel() for a in adam.m])
        v = np.concatenate([a.ravel() for a in adam.v])
        payload[f"adam.{name}.m"] = m.astype(m.dtype.newbyteorder("<"))
        payload[f"adam.{name}.v"] = v.astype(v.dtype.newbyteorder("<"))
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path):
    """Load a checkpoint written by save_checkpoint.

    Returns (nets, adams, rng, extra, arrays). RNG is None when no state was saved.
    """
    with np.load(path, allow_pickle=False) as z:
        arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr.")}
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise StateError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        nets, adams = {}, {}
        for name, m in meta["nets"].items():
            net = DenseNet(m["widths"], seed=0, activation=m["activation"],
                           members=m["members"], dtype=np.dtype(m["dtype"]))
            flat = z[f"net.{name}.params"].astype(np.dtype(m["dtype"]), copy=False)
            net.set_flat(flat)
            nets[name] = net
        for name, m in meta["adams"].items():
            adam = Adam(nets[name].params, lr=m["lr"], beta1=m["beta1"],
                        beta2=m["beta2"], eps=m["eps"])
            adam.t = int(m["t"])
            dtype = nets[name].dtype
            mm = z[f"adam.{name}.m"].astype(dtype, copy=False)
            vv = z[f"adam.{name}.v"].astype(dtype, copy=False)
            i = 0
            for a, b in zip(adam.m, adam.v):
                a[...] = mm[i:i + a.size].reshape(a.shape)
                b[...] = vv[i:i + b.size].reshape(b.shape)
                i += a.size
            adams[name] = adam
        rng = None
        if "rng_state" in meta:
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng_state"]
    return nets, adams, rng, meta.get("extra", {}), arrays
