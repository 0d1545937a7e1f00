"""
Actor-critic MLPs and clipped-surrogate PPO in plain numpy.

Both networks are obs_dim -> 128 -> 128 -> 128 with ELU activations and a
linear head (24 action means for the actor, one value for the critic). The
policy is a diagonal Gaussian with a state-independent log-std vector.
Gradients are hand-written backprop and are checked against central finite
differences in the test suite.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

logger = logging.getLogger(__name__)

LOG_STD_MIN = float(np.log(1e-4))
LOG_STD_MAX = float(np.log(4.0))
_LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_FORMAT = 1


class LearnError(Exception):
    """Base exception for learning errors."""
    pass


class ShapeError(LearnError):
    """Raised when an input does not match the network dimensions."""
    pass


class NonFiniteLossError(LearnError):
    """Raised when a PPO loss becomes NaN/Inf; the update is abandoned."""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class CheckpointError(LearnError):
    """Malformed checkpoint document."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class CheckpointIncompatibleError(LearnError):
    """Checkpoint layer shapes do not match the requested network."""

    def __init__(self, layer: str, expected: Sequence[int], found: Sequence[int]):
        super().__init__(f"layer '{layer}' has shape {tuple(found)}, expected {tuple(expected)}")
        self.layer = layer


class PpoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.99, gt=0.0, le=1.0)
    lam: float = Field(0.95, gt=0.0, le=1.0)
    clip: float = Field(0.2, gt=0.0)
    epochs: int = Field(5, ge=1)
    minibatches: int = Field(4, ge=1)
    value_coef: float = Field(1.0, ge=0.0)
    clip_value_loss: bool = True
    entropy_coef: float = Field(0.01, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    schedule: Literal["adaptive", "fixed"] = "adaptive"
    desired_kl: float = Field(0.01, gt=0.0)
    lr_min: float = Field(1e-5, gt=0.0)
    lr_max: float = Field(1e-2, gt=0.0)
    max_grad_norm: float = Field(1.0, gt=0.0)
    rollout_length: int = Field(24, ge=1)
    init_noise_std: float = Field(1.0, gt=0.0)
    hidden_sizes: List[int] = Field(default_factory=lambda: [128, 128, 128])
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def check_bounds(self) -> "PpoConfig":
        if not self.lr_min <= self.learning_rate <= self.lr_max:
            raise ValueError("learning_rate must lie within [lr_min, lr_max]")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive widths")
        if not LOG_STD_MIN <= np.log(self.init_noise_std) <= LOG_STD_MAX:
            raise ValueError("init_noise_std must lie within [1e-4, 4]")
        return self


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass
class PolicyParams:
    """Actor and critic weights (out, in), biases (out,) and the log-std vector."""
    actor_weights: List[np.ndarray]
    actor_biases: List[np.ndarray]
    critic_weights: List[np.ndarray]
    critic_biases: List[np.ndarray]
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.actor_weights[0].shape[1]

    @property
    def action_dim(self) -> int:
        return self.actor_weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> List[int]:
        return [w.shape[0] for w in self.actor_weights[:-1]]

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        items = []
        for net in ("actor", "critic"):
            weights, biases = getattr(self, f"{net}_weights"), getattr(self, f"{net}_biases")
            for i, (w, b) in enumerate(zip(weights, biases)):
                items.append((f"{net}.{i}.weight", w))
                items.append((f"{net}.{i}.bias", b))
        items.append(("log_std", self.log_std))
        return items

    def flat(self) -> np.ndarray:
        return np.concatenate([array.ravel() for _, array in self.named_arrays()])

    def with_flat(self, vector: np.ndarray) -> "PolicyParams":
        """Same layout as self, values taken from a flat vector."""
        arrays, offset = [], 0
        for _, array in self.named_arrays():
            arrays.append(vector[offset:offset + array.size].reshape(array.shape).copy())
            offset += array.size
        return self._from_ordered(arrays)

    def _from_ordered(self, arrays: List[np.ndarray]) -> "PolicyParams":
        n_actor, n_critic = len(self.actor_weights), len(self.critic_weights)
        actor = arrays[:2 * n_actor]
        critic = arrays[2 * n_actor:2 * (n_actor + n_critic)]
        return PolicyParams(
            actor_weights=actor[0::2], actor_biases=actor[1::2],
            critic_weights=critic[0::2], critic_biases=critic[1::2],
            log_std=arrays[-1],
        )

    def copy(self) -> "PolicyParams":
        return self._from_ordered([array.copy() for _, array in self.named_arrays()])


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    flat = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(obs_dim: int, action_dim: int, rng: np.random.Generator,
                hidden_sizes: Sequence[int] = (128, 128, 128), init_noise_std: float = 1.0) -> PolicyParams:
    """
    Orthogonal initialization: gain sqrt(2) on hidden layers, 0.01 on the actor
    head, 1.0 on the critic head, zero biases.
    """
    def build(out_dim: int, head_gain: float) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        sizes = [obs_dim, *hidden_sizes, out_dim]
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            gain = head_gain if i == len(sizes) - 2 else np.sqrt(2.0)
            weights.append(_orthogonal(rng, sizes[i + 1], sizes[i], gain))
            biases.append(np.zeros(sizes[i + 1]))
        return weights, biases

    actor_w, actor_b = build(action_dim, 0.01)
    critic_w, critic_b = build(1, 1.0)
    return PolicyParams(actor_w, actor_b, critic_w, critic_b, np.full(action_dim, np.log(init_noise_std)))


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def _mlp_forward(weights: List[np.ndarray], biases: List[np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, list]:
    inputs, pre = [], []
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < len(weights) - 1:
            pre.append(z)
            h = elu(z)
        else:
            h = z
    return h, [inputs, pre]


def _mlp_backward(weights: List[np.ndarray], memory: list, dy: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    inputs, pre = memory
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    delta = dy
    for i in reversed(range(len(weights))):
        grad_w[i] = delta.T @ inputs[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * elu_grad(pre[i - 1])
    return grad_w, grad_b


def _check_obs(params: PolicyParams, observation: np.ndarray) -> np.ndarray:
    observation = np.asarray(observation, dtype=float)
    if observation.shape[-1] != params.obs_dim:
        raise ShapeError(f"observation has {observation.shape[-1]} entries, network expects {params.obs_dim}")
    return observation


def forward(params: PolicyParams, observation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate actor and critic.

    Args:
        params (PolicyParams): Network weights
        observation (np.ndarray): (obs_dim,) or (B, obs_dim)

    Returns:
        Tuple[np.ndarray, np.ndarray]: action means (.., 24) and values (..)
    """
    observation = _check_obs(params, observation)
    batch = np.atleast_2d(observation)
    mean, _ = _mlp_forward(params.actor_weights, params.actor_biases, batch)
    value, _ = _mlp_forward(params.critic_weights, params.critic_biases, batch)
    if observation.ndim == 1:
        return mean[0], value[0, 0]
    return mean, value[:, 0]


def value_of(params: PolicyParams, observation: np.ndarray) -> np.ndarray:
    batch = np.atleast_2d(_check_obs(params, observation))
    value, _ = _mlp_forward(params.critic_weights, params.critic_biases, batch)
    return value[:, 0]


def _clamped_log_std(params: PolicyParams) -> np.ndarray:
    return np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)


def log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Exact diagonal-Gaussian log density, summed over the action dimension."""
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * _LOG_2PI


def entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


def sample_action(params: PolicyParams, mean: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a ~ N(mean, diag(exp(log_std))^2) and return it with its log-probability."""
    mean = np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(mean)):
        raise LearnError("action mean contains non-finite values")
    log_std = _clamped_log_std(params)
    action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return action, log_prob(mean, log_std, action)


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap: Union[float, np.ndarray],
        gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation over a (T,) or (T, N) rollout.

    done_t masks bootstrapping from step t+1; `bootstrap` is V at the horizon.

    Returns:
        Tuple[np.ndarray, np.ndarray]: advantages and returns (advantages + values)
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    not_done = 1.0 - np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == not_done.shape):
        raise ShapeError(f"rewards {rewards.shape}, values {values.shape} and dones {not_done.shape} differ")
    advantages = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap, dtype=float), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


# ---------------------------------------------------------------------------
# Rollout storage
# ---------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Rectangular (n_steps, n_envs) storage for one PPO iteration."""
    n_steps: int
    n_envs: int
    obs_dim: int
    action_dim: int
    observations: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    action_means: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    reasons: np.ndarray = field(init=False)
    bootstrap: np.ndarray = field(init=False)
    advantages: Optional[np.ndarray] = field(init=False, default=None)
    returns: Optional[np.ndarray] = field(init=False, default=None)
    old_log_std: Optional[np.ndarray] = field(init=False, default=None)
    step: int = field(init=False, default=0)

    def __post_init__(self):
        t, n = self.n_steps, self.n_envs
        self.observations = np.zeros((t, n, self.obs_dim))
        self.actions = np.zeros((t, n, self.action_dim))
        self.action_means = np.zeros((t, n, self.action_dim))
        self.log_probs = np.zeros((t, n))
        self.values = np.zeros((t, n))
        self.rewards = np.zeros((t, n))
        self.dones = np.zeros((t, n), dtype=bool)
        self.reasons = np.full((t, n), "", dtype=object)
        self.bootstrap = np.zeros(n)

    @property
    def full(self) -> bool:
        return self.step == self.n_steps

    def clear(self) -> None:
        self.step = 0
        self.advantages = None
        self.returns = None

    def add(self, observations: np.ndarray, actions: np.ndarray, action_means: np.ndarray, log_probs: np.ndarray,
            values: np.ndarray, rewards: np.ndarray, dones: np.ndarray, reasons: Optional[np.ndarray] = None) -> None:
        if self.full:
            raise LearnError("rollout buffer is full")
        if not np.all(np.isfinite(rewards)):
            raise LearnError(f"non-finite reward at rollout step {self.step}")
        t = self.step
        self.observations[t] = observations
        self.actions[t] = actions
        self.action_means[t] = action_means
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones
        if reasons is not None:
            self.reasons[t] = reasons
        self.step += 1

    def compute_returns(self, bootstrap: np.ndarray, config: PpoConfig) -> None:
        self.bootstrap = np.asarray(bootstrap, dtype=float)
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, self.bootstrap,
                                            config.gamma, config.lam)


class MiniBatch(NamedTuple):
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_values: np.ndarray
    old_means: np.ndarray
    old_log_std: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def iterate_minibatches(buffer: RolloutBuffer, config: PpoConfig, rng: np.random.Generator):
    """Yield shuffled minibatches; each minibatch's advantages are normalized on their own."""
    if buffer.advantages is None:
        raise LearnError("compute_returns must run before the update")
    size = buffer.n_steps * buffer.n_envs

    def flat(array: np.ndarray) -> np.ndarray:
        return array.reshape((size,) + array.shape[2:])

    observations, actions, means = flat(buffer.observations), flat(buffer.actions), flat(buffer.action_means)
    log_probs, values = flat(buffer.log_probs), flat(buffer.values)
    advantages, returns = flat(buffer.advantages), flat(buffer.returns)
    for _ in range(config.epochs):
        order = rng.permutation(size)
        for chunk in np.array_split(order, config.minibatches):
            yield MiniBatch(
                observations=observations[chunk],
                actions=actions[chunk],
                old_log_probs=log_probs[chunk],
                old_values=values[chunk],
                old_means=means[chunk],
                old_log_std=buffer.old_log_std,
                advantages=normalize_advantages(advantages[chunk]),
                returns=returns[chunk],
            )


# ---------------------------------------------------------------------------
# Loss, gradients, optimizer
# ---------------------------------------------------------------------------

def approx_kl(old_mean: np.ndarray, old_log_std: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> float:
    """Mean KL(old || new) between diagonal Gaussians."""
    old_var = np.exp(2.0 * old_log_std)
    var = np.exp(2.0 * log_std)
    kl = np.sum(log_std - old_log_std + (old_var + (old_mean - mean) ** 2) / (2.0 * var) - 0.5, axis=-1)
    return float(np.mean(kl))


def loss_and_gradients(params: PolicyParams, batch: MiniBatch, config: PpoConfig) -> Tuple[float, PolicyParams, Dict[str, float]]:
    """
    Total PPO loss and its exact gradient with respect to every parameter.

    loss = -mean(min(rho A, clip(rho, 1 +- eps) A)) + c_v * value_loss - c_e * entropy
    """
    b = batch.observations.shape[0]
    mean, actor_memory = _mlp_forward(params.actor_weights, params.actor_biases, batch.observations)
    value_out, critic_memory = _mlp_forward(params.critic_weights, params.critic_biases, batch.observations)
    value = value_out[:, 0]
    log_std = params.log_std
    inv_var = np.exp(-2.0 * log_std)

    new_log_prob = log_prob(mean, log_std, batch.actions)
    ratio = np.exp(new_log_prob - batch.old_log_probs)
    advantages = batch.advantages
    unclipped = ratio * advantages
    clipped_ratio = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    clipped = clipped_ratio * advantages
    surrogate = -np.mean(np.minimum(unclipped, clipped))
    # d(-min)/d(ratio): the unclipped branch when it is the smaller, otherwise the clip slope
    inside = (ratio > 1.0 - config.clip) & (ratio < 1.0 + config.clip)
    d_ratio = np.where(unclipped <= clipped, -advantages, -advantages * inside) / b
    d_log_prob = d_ratio * ratio

    error = value - batch.returns
    if config.clip_value_loss:
        value_clipped = batch.old_values + np.clip(value - batch.old_values, -config.clip, config.clip)
        error_clipped = value_clipped - batch.returns
        use_plain = error ** 2 >= error_clipped ** 2
        value_loss = np.mean(np.maximum(error ** 2, error_clipped ** 2))
        slope = np.abs(value - batch.old_values) < config.clip
        d_value = np.where(use_plain, 2.0 * error, 2.0 * error_clipped * slope) / b
    else:
        value_loss = np.mean(error ** 2)
        d_value = 2.0 * error / b

    ent = entropy(log_std)
    loss = surrogate + config.value_coef * value_loss - config.entropy_coef * ent

    diff = batch.actions - mean
    d_mean = d_log_prob[:, None] * diff * inv_var
    d_log_std = np.sum(d_log_prob[:, None] * (diff * diff * inv_var - 1.0), axis=0) - config.entropy_coef
    actor_w, actor_b = _mlp_backward(params.actor_weights, actor_memory, d_mean)
    critic_w, critic_b = _mlp_backward(params.critic_weights, critic_memory,
                                       (config.value_coef * d_value)[:, None])
    grads = PolicyParams(actor_w, actor_b, critic_w, critic_b, d_log_std)
    stats = {
        "policy_loss": float(surrogate),
        "value_loss": float(value_loss),
        "entropy": ent,
        "approx_kl": approx_kl(batch.old_means, batch.old_log_std, mean, log_std),
        "clip_fraction": float(np.mean(~inside)),
    }
    return float(loss), grads, stats


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """Adam on a flat parameter vector."""
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {"lr": self.lr, "t": self.t}


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / (norm + 1e-12))
    return grad, norm


def adapt_learning_rate(lr: float, kl: float, config: PpoConfig) -> float:
    if config.schedule != "adaptive":
        return lr
    if kl > 2.0 * config.desired_kl:
        lr = lr / 2.0
    elif kl < config.desired_kl / 2.0:
        lr = lr * 2.0
    return float(min(max(lr, config.lr_min), config.lr_max))


def ppo_update(params: PolicyParams, buffer: RolloutBuffer, config: PpoConfig, optimizer: Adam,
               rng: np.random.Generator) -> Tuple[PolicyParams, Dict[str, float]]:
    """
    Run config.epochs x config.minibatches clipped-surrogate updates.

    The learning rate held by the optimizer adapts to the measured KL before
    each gradient step. A non-finite loss abandons the whole update and the
    caller keeps the parameters it passed in.

    Returns:
        Tuple[PolicyParams, Dict[str, float]]: updated parameters and mean statistics
    """
    if not buffer.full:
        raise LearnError(f"rollout buffer holds {buffer.step} of {buffer.n_steps} steps")
    if buffer.observations.shape[-1] != params.obs_dim:
        raise ShapeError(f"buffer observations have {buffer.observations.shape[-1]} entries, network expects {params.obs_dim}")
    current = params.copy()
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0, "grad_norm": 0.0}
    count = 0
    for index, batch in enumerate(iterate_minibatches(buffer, config, rng)):
        loss, grads, stats = loss_and_gradients(current, batch, config)
        if not np.isfinite(loss):
            raise NonFiniteLossError("PPO loss is not finite", {
                "epoch": index // config.minibatches,
                "minibatch": index % config.minibatches,
                **stats,
                "max_abs_param": float(np.max(np.abs(current.flat()))),
            })
        optimizer.lr = adapt_learning_rate(optimizer.lr, stats["approx_kl"], config)
        grad, norm = clip_grad_norm(grads.flat(), config.max_grad_norm)
        current = current.with_flat(optimizer.step(current.flat(), grad))
        current.log_std = np.clip(current.log_std, LOG_STD_MIN, LOG_STD_MAX)
        for key, value in stats.items():
            totals[key] += value
        totals["grad_norm"] += norm
        count += 1
    result = {key: value / count for key, value in totals.items()}
    result["lr"] = optimizer.lr
    return current, result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class LayerDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    values: Union[List[List[float]], List[float]]


class CheckpointDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: int = Field(CHECKPOINT_FORMAT)
    iteration: int = Field(..., ge=0)
    phase: str = "noisy"
    obs_dim: int = Field(..., ge=1)
    action_dim: int = Field(..., ge=1)
    hidden_sizes: List[int]
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved experiment configuration echo")
    layers: List[LayerDocument]


class LoadedCheckpoint(NamedTuple):
    params: PolicyParams
    config: Dict[str, Any]
    iteration: int
    phase: str


def save_checkpoint(params: PolicyParams, config: Dict[str, Any], iteration: int, phase: str = "noisy") -> bytes:
    """Serialize weights, config echo, iteration and curriculum phase to one JSON document."""
    document = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "phase": str(phase),
        "obs_dim": params.obs_dim,
        "action_dim": params.action_dim,
        "hidden_sizes": params.hidden_sizes,
        "config": config,
        "layers": [{"name": name, "values": array.tolist()} for name, array in params.named_arrays()],
    }
    return orjson.dumps(document, option=orjson.OPT_SERIALIZE_NUMPY)


def _expected_shapes(obs_dim: int, action_dim: int, hidden: Sequence[int]) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    for net, out_dim in (("actor", action_dim), ("critic", 1)):
        sizes = [obs_dim, *hidden, out_dim]
        for i in range(len(sizes) - 1):
            shapes.append((f"{net}.{i}.weight", (sizes[i + 1], sizes[i])))
            shapes.append((f"{net}.{i}.bias", (sizes[i + 1],)))
    shapes.append(("log_std", (action_dim,)))
    return shapes


def load_checkpoint(document: Union[bytes, str], obs_dim: Optional[int] = None,
                    hidden_sizes: Optional[Sequence[int]] = None) -> LoadedCheckpoint:
    """
    Parse and validate a checkpoint document.

    Args:
        document (Union[bytes, str]): JSON text written by save_checkpoint
        obs_dim (Optional[int]): Observation size the caller will feed the network
        hidden_sizes (Optional[Sequence[int]]): Hidden widths the caller expects

    Returns:
        LoadedCheckpoint: params, config echo, iteration and curriculum phase
    """
    try:
        raw = orjson.loads(document)
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint JSON: {e}") from e
    try:
        parsed = CheckpointDocument.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in first["loc"])
        raise CheckpointError(first["msg"], path) from e

    wanted_obs = parsed.obs_dim if obs_dim is None else obs_dim
    wanted_hidden = parsed.hidden_sizes if hidden_sizes is None else list(hidden_sizes)
    expected = _expected_shapes(wanted_obs, parsed.action_dim, wanted_hidden)
    if len(parsed.layers) != len(expected):
        raise CheckpointIncompatibleError("layers", (len(expected),), (len(parsed.layers),))
    arrays = []
    for (name, shape), layer in zip(expected, parsed.layers):
        if layer.name != name:
            raise CheckpointIncompatibleError(name, shape, (0,))
        array = np.asarray(layer.values, dtype=np.float64)
        if array.shape != shape:
            raise CheckpointIncompatibleError(name, shape, array.shape)
        if not np.all(np.isfinite(array)):
            raise CheckpointError("non-finite weight", f"$.layers[{len(arrays)}].values")
        arrays.append(array)
    n_layers = len(wanted_hidden) + 1
    params = PolicyParams(
        actor_weights=arrays[0:2 * n_layers:2], actor_biases=arrays[1:2 * n_layers:2],
        critic_weights=arrays[2 * n_layers:4 * n_layers:2], critic_biases=arrays[2 * n_layers + 1:4 * n_layers:2],
        log_std=arrays[-1],
    )
    return LoadedCheckpoint(params, parsed.config, parsed.iteration, parsed.phase)


# ---------------------------------------------------------------------------
# Rollouts and the training loop
# ---------------------------------------------------------------------------

def collect_rollout(env, params: PolicyParams, buffer: RolloutBuffer, rng: np.random.Generator,
                    config: PpoConfig, on_step=None) -> None:
    """
    Fill `buffer` with n_steps transitions from a QuietWalkEnv.

    Time-outs are bootstrapped with r <- r + gamma * V(terminal observation).
    `on_step(rewards, dones, info)` sees every environment step.
    """
    buffer.clear()
    buffer.old_log_std = _clamped_log_std(params).copy()
    observation = env.observation.vector
    for _ in range(buffer.n_steps):
        mean, value = forward(params, observation)
        action, logp = sample_action(params, mean, rng)
        next_observation, rewards, dones, info = env.step(action)
        reward = rewards.total.copy()
        time_outs = info["time_outs"]
        if np.any(time_outs):
            reward[time_outs] += config.gamma * value_of(params, info["terminal_observation"][time_outs])
        buffer.add(observation, action, mean, logp, value, reward, dones, info["reason"])
        if on_step is not None:
            on_step(rewards, dones, info)
        observation = next_observation
    buffer.compute_returns(value_of(params, observation), config)


class OnPolicyRunner:
    def __init__(self, env, config: PpoConfig, seed: int, params: Optional[PolicyParams] = None):
        """
        Tie a vectorized environment, PPO and the curriculum latch together.

        Args:
            env: QuietWalkEnv to train in (carries the curriculum latch)
            config (PpoConfig): PPO hyperparameters
            seed (int): Seed of the policy-side generator (sampling, minibatch order)
            params (Optional[PolicyParams]): Starting weights, fresh initialization when None
        """
        self.env = env
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.params = params or init_params(env.obs_dim, env.action_dim, self.rng,
                                            config.hidden_sizes, config.init_noise_std)
        self.optimizer = Adam(self.params.flat().size, config.learning_rate,
                              config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.buffer = RolloutBuffer(config.rollout_length, env.n_envs, env.obs_dim, env.action_dim)
        self.iteration = 0
        self.flip_iteration: Optional[int] = None
        self._episode_sums: Dict[str, np.ndarray] = {}

    def run_iteration(self) -> Dict[str, Any]:
        """Collect one rollout, update the curriculum latch, run one PPO update."""
        sums = self._episode_sums
        completed: Dict[str, List[float]] = {}
        touchdown_speeds: List[np.ndarray] = []

        def on_step(rewards, dones, info):
            for term, value in rewards.as_dict().items():
                running = sums.setdefault(term, np.zeros(self.env.n_envs))
                running += value
                if np.any(dones):
                    completed.setdefault(term, []).extend(running[dones].tolist())
                    running[dones] = 0.0
            contact = info["contact"]
            touchdown_speeds.append(contact.touchdown_speed[contact.touchdown])

        collect_rollout(self.env, self.params, self.buffer, self.rng, self.config, on_step)
        scores, lengths = self.env.pop_completed()
        before = self.env.latch.phase
        phase = self.env.latch.update(scores)
        if phase is not before:
            self.env.sync_phase()
            self.flip_iteration = self.iteration
        self.params, stats = ppo_update(self.params, self.buffer, self.config, self.optimizer, self.rng)

        speeds = np.concatenate(touchdown_speeds) if touchdown_speeds else np.zeros(0)
        row = {
            "iteration": self.iteration,
            "phase": phase.value,
            "tracking_score": float(np.mean(scores)) if scores else None,
            "episodes": len(scores),
            "episode_length": float(np.mean(lengths)) if lengths else None,
            "touchdown_speed": float(speeds.mean()) if speeds.size else None,
            "mean_reward": float(self.buffer.rewards.mean()),
            **{f"reward_{term}": (float(np.mean(values)) if values else None) for term, values in
               ((t, completed.get(t, [])) for t in sums)},
            **stats,
        }
        self.iteration += 1
        return row

    def learn(self, n_iterations: int, on_iteration=None, show_progress: bool = True) -> List[Dict[str, Any]]:
        rows = []
        for _ in tqdm(range(n_iterations), desc="train", disable=not show_progress):
            row = self.run_iteration()
            logger.info(
                f"iter {row['iteration']} phase={row['phase']} score={row['tracking_score']} "
                f"kl={row['approx_kl']:.4f} lr={row['lr']:.2e}"
            )
            rows.append(row)
            if on_iteration is not None:
                on_iteration(row, self)
        return rows
