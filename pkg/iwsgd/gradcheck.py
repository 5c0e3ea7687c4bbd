"""
Finite-difference checks of the analytic gradients.

Two suites run on randomly drawn tiny networks:

* the per-sample gradient of log p(y | x, eps) from `net.backward`;
* the combined gradient from `objective.iwsgd_combine`, checked against the
  derivative of lsgd_inner over the same S draws held fixed.

The numeric side evaluates an independent reference forward pass in extended
precision (`np.longdouble`) with a fourth-order central stencil, vectorized
over every perturbed parameter vector. Its error stays far below the 1e-6
per-parameter relative tolerance even for gradient entries near the 1e-8
denominator floor.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .ndcore import Tensor
from .net import (
    Activation,
    Dense,
    NetworkParams,
    NetworkSpec,
    NoiseDraw,
    NoiseMode,
    NoiseSpec,
    Phase,
    backward,
    backward_rows,
    forward,
    init_params,
    log_likelihood,
    mlp_spec,
    sample_draws,
    stack_draws,
)
from .objective import SampleEvaluation, iwsgd_combine

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-6
DENOMINATOR_FLOOR = 1e-8
KINK_MARGIN = 1e-2

_STENCIL_OFFSETS = (-2.0, -1.0, 1.0, 2.0)


@dataclass
class GradcheckCase:
    spec: NetworkSpec
    params: NetworkParams
    x: Tensor
    y: int
    draws: List[NoiseDraw]

    def describe(self) -> str:
        dims = [self.spec.input_dim] + [layer.out_dim for _, layer in self.spec.dense_layers]
        activation = next(layer.kind for layer in self.spec.layers if isinstance(layer, Activation))
        noise = self.spec.noise_layers[0][1].spec
        if noise.mode is NoiseMode.BERNOULLI:
            noise_desc = f"keep={noise.keep_prob:.3f}" + (" inverted" if noise.inverted else "")
        else:
            noise_desc = f"sigma={noise.sigma:.3f}"
        return f"dims={dims} activation={activation} {noise.mode.value} {noise_desc} S={len(self.draws)}"


@dataclass
class GradcheckResult:
    trial: int
    seed: int
    sample_error: float
    combined_error: float
    description: str

    @property
    def worst(self) -> float:
        return max(self.sample_error, self.combined_error)


def central_difference(
    f: Callable[[np.ndarray], np.ndarray],
    theta: Tensor,
    step: float = DEFAULT_STEP
) -> np.ndarray:
    """Fourth-order central differences of a batched function.

    Args:
        f: Maps a [m x n] array of parameter vectors to [m] or [m x k] values
        theta: Point of evaluation, [n]
        step: Finite-difference step

    Returns:
        [n x k] derivatives (k = 1 for scalar-valued f), in extended precision
    """
    theta = np.asarray(theta, dtype=np.longdouble)
    n = theta.size
    step = np.longdouble(step)
    offsets = np.array(_STENCIL_OFFSETS, dtype=np.longdouble)
    shifts = offsets[:, None, None] * step * np.eye(n, dtype=np.longdouble)[None, :, :]
    thetas = (theta[None, None, :] + shifts).reshape(len(offsets) * n, n)
    values = np.asarray(f(thetas)).reshape(len(offsets), n, -1)
    return (values[0] - 8 * values[1] + 8 * values[2] - values[3]) / (12 * step)


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.longdouble)
    numeric = np.asarray(numeric, dtype=np.longdouble)
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def reference_log_likelihoods(
    spec: NetworkSpec,
    thetas: np.ndarray,
    x: Tensor,
    y: int,
    eps: Dict[int, Tensor]
) -> np.ndarray:
    """log p(y | x, eps_s) for many flat parameter vectors at once.

    Args:
        spec: Network spec
        thetas: [m x n] flat parameter vectors (NetworkParams.flat layout)
        x: Single input [d]
        y: Class index
        eps: Noise per noise layer, [S x width]

    Returns:
        [m x S] log-likelihoods in extended precision
    """
    thetas = np.asarray(thetas, dtype=np.longdouble)
    m = thetas.shape[0]
    rows = next(iter(eps.values())).shape[0] if eps else 1
    a = np.broadcast_to(np.asarray(x, dtype=np.longdouble), (m, rows, spec.input_dim))
    offset = 0
    for index, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            size = layer.out_dim * layer.in_dim
            weight = thetas[:, offset:offset + size].reshape(m, layer.out_dim, layer.in_dim)
            offset += size
            a = np.einsum("msi,moi->mso", a, weight)
            if layer.has_bias:
                a = a + thetas[:, None, offset:offset + layer.out_dim]
                offset += layer.out_dim
        elif isinstance(layer, Activation):
            a = np.maximum(a, 0) if layer.kind == "relu" else np.tanh(a)
        else:
            noise = layer.spec
            e = np.asarray(eps[index], dtype=np.longdouble)[None, :, :]
            if noise.mode is NoiseMode.BERNOULLI:
                a = a * e / np.longdouble(noise.keep_prob) if noise.inverted else a * e
            else:
                a = a + e
    shifted = a - a.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return log_probs[..., y]


def _near_kink(spec: NetworkSpec, params: NetworkParams, x: Tensor, draws: List[NoiseDraw]) -> bool:
    for draw in draws:
        trace = forward(spec, params, x, draw, Phase.TRAIN)
        for index, layer in enumerate(spec.layers):
            if isinstance(layer, Activation) and layer.kind == "relu":
                if np.any(np.abs(trace.inputs[index]) < KINK_MARGIN):
                    return True
    return False


def random_case(rng: np.random.Generator) -> GradcheckCase:
    """Draw a tiny network, its parameters, an example and S noise draws.

    The example and draws are redrawn (up to 20 times) while any relu
    pre-activation lies within 1e-2 of its kink.
    """
    depth = int(rng.integers(1, 3))
    dims = [int(rng.integers(2, 5))] + [int(rng.integers(3, 9)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    activation = "relu" if rng.random() < 0.5 else "tanh"
    if rng.random() < 0.5:
        noise = NoiseSpec(
            NoiseMode.BERNOULLI,
            keep_prob=float(rng.uniform(0.3, 0.9)),
            inverted=bool(rng.random() < 0.25)
        )
    else:
        noise = NoiseSpec(NoiseMode.GAUSSIAN, sigma=float(rng.uniform(0.1, 1.0)))
    spec = mlp_spec(dims, activation, noise)
    params = init_params(spec, int(rng.integers(0, 2 ** 32)))
    params = params.with_flat(params.flat() + 0.1 * rng.standard_normal(params.size))
    samples = int(rng.integers(1, 5))
    y = int(rng.integers(0, dims[-1]))

    for _ in range(20):
        x = rng.standard_normal(dims[0])
        block = sample_draws(spec, rng, samples)
        draws = [NoiseDraw({k: v[s] for k, v in block.eps.items()}) for s in range(samples)]
        if not _near_kink(spec, params, x, draws):
            break
    return GradcheckCase(spec, params, x, y, draws)


def check_sample_gradient(case: GradcheckCase, step: float = DEFAULT_STEP, corrupt: bool = False) -> float:
    """Worst relative error of backward() over every draw of the case."""
    block = stack_draws(case.draws)
    numeric = central_difference(
        lambda thetas: reference_log_likelihoods(case.spec, thetas, case.x, case.y, block.eps),
        case.params.flat(),
        step
    )
    worst = 0.0
    for s, draw in enumerate(case.draws):
        trace = forward(case.spec, case.params, case.x, draw, Phase.TRAIN)
        analytic = backward(case.spec, case.params, trace, case.y).flat()
        if corrupt:
            analytic[0] += 1e-3
        worst = max(worst, relative_error(analytic, numeric[:, s]))
    return worst


def _reference_lsgd_inner(log_liks: np.ndarray) -> np.ndarray:
    shift = log_liks.max(axis=-1, keepdims=True)
    return (shift + np.log(np.mean(np.exp(log_liks - shift), axis=-1, keepdims=True)))[..., 0]


def check_combined_gradient(case: GradcheckCase, step: float = DEFAULT_STEP, corrupt: bool = False) -> float:
    """Relative error of iwsgd_combine against d lsgd_inner / d params."""
    spec, x, y = case.spec, case.x, case.y
    block = stack_draws(case.draws)
    rows = np.ascontiguousarray(np.broadcast_to(x, (len(case.draws), x.size)))
    trace = forward(spec, case.params, rows, block, Phase.TRAIN)
    log_liks = log_likelihood(trace, y)
    grads = backward_rows(spec, case.params, trace, y)
    samples = [SampleEvaluation(float(ll), g) for ll, g in zip(log_liks, grads)]
    analytic = iwsgd_combine(samples)[0].flat()
    if corrupt:
        analytic[0] += 1e-3

    numeric = central_difference(
        lambda thetas: _reference_lsgd_inner(reference_log_likelihoods(spec, thetas, x, y, block.eps)),
        case.params.flat(),
        step
    )
    return relative_error(analytic, numeric[:, 0])


def run_gradcheck(
    seed: int,
    trials: int,
    step: float = DEFAULT_STEP,
    corrupt: bool = False,
    on_trial: Optional[Callable[[GradcheckResult], None]] = None
) -> List[GradcheckResult]:
    """Run both suites on `trials` random cases.

    Args:
        seed: Base seed; trial t uses the generator seeded with [seed, t]
        trials: Number of random cases
        step: Finite-difference step
        corrupt: Perturb the analytic gradients (fault injection)
        on_trial: Optional callback per finished trial

    Returns:
        One result per trial
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    results = []
    for trial in range(trials):
        case = random_case(np.random.default_rng([seed, trial]))
        result = GradcheckResult(
            trial=trial,
            seed=seed,
            sample_error=check_sample_gradient(case, step, corrupt),
            combined_error=check_combined_gradient(case, step, corrupt),
            description=case.describe(),
        )
        results.append(result)
        if on_trial is not None:
            on_trial(result)
    return results


def worst_result(results: List[GradcheckResult]) -> Tuple[GradcheckResult, bool]:
    """The trial with the largest error and whether every trial passed."""
    worst = max(results, key=lambda r: r.worst)
    return worst, worst.worst < DEFAULT_TOLERANCE
