# Copyright (C) 2026 Jean Paul Fernandez
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

import numpy as np
from dataclasses import replace
from colorama import Fore, Style
from typing import Callable, Dict, Iterator, Optional

from app import utils
from app.adapters import (
    AdapterConfig,
    AdapterParams,
    GNum,
    Variant,
    apply_adapter,
    global_prompt_rows,
)
from app.encoders import GlobalTokenProjector
from app.errors import ContractError, NumericalError
from app.tensor import Tensor, gradients, mul, total

DEFAULT_EPS = 1e-5
TOLERANCE = 1e-4
# Floor on the denominator of the relative error for near-zero gradients.
REL_FLOOR = 1e-6

# Small enough for finite differences over every entry, large enough to exercise every path.
SMALL_DIMS: Dict[str, int] = {"N": 4, "M": 3, "C": 4, "D": 3, "C_i": 4, "E": 4, "C_prime": 5}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS) -> float:
    """
    Compares the tape gradient of a scalar function with central differences.

    Args:
        f (Callable): Builds the scalar loss from the current values of `x`.
        x (Tensor): The tensor to perturb; its values are restored afterwards.
        eps (float): Perturbation size, in (0, 1e-2].

    Returns:
        float: max over entries of |analytic − numeric| / max(|analytic|, |numeric|, 1e-6).

    Raises:
        NumericalError: a loss or gradient entry is not finite; names the entry index.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"grad_check eps {eps} outside (0, 1e-2]")

    was_tracked = x.requires_grad
    x.requires_grad = True
    base = x.values.copy()
    try:
        loss = f(x)
        if loss.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
        analytic = gradients(loss, [x])[0]

        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            x.values = base.copy()
            x.values[idx] += eps
            f_plus = f(x).item()
            x.values = base.copy()
            x.values[idx] -= eps
            f_minus = f(x).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"non-finite loss while perturbing entry {idx}")
            numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
    finally:
        x.values = base
        x.requires_grad = was_tracked

    bad = np.argwhere(~np.isfinite(analytic))
    if bad.size:
        raise NumericalError(f"non-finite tape gradient at entry {tuple(int(i) for i in bad[0])}")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- ADAPTER SUITE ---


def suite_configs(seed: int = 0) -> Iterator[tuple[str, AdapterConfig]]:
    """Every variant at small dims, plus the two extra G-Num settings of the fused variant."""
    for variant in Variant:
        yield variant.value, AdapterConfig(variant=variant, seed=seed, **SMALL_DIMS)
    fused = AdapterConfig(variant=Variant.global_plus_local, seed=seed, **SMALL_DIMS)
    yield "global_plus_local[g=0]", replace(fused, g_num=GNum.zero)
    yield "global_plus_local[g=L]", replace(fused, g_num=GNum.all)


def check_variant(cfg: AdapterConfig, seed: int, eps: float = DEFAULT_EPS) -> float:
    """
    grad_check over the full forward pass of one adapter, read out through a
    fixed random linear functional. Checks the inputs and every parameter.
    """
    rng = utils.make_rng(seed, 7)
    X = Tensor(rng.normal(size=(cfg.N, cfg.C)), name="X")
    Y = Tensor(rng.normal(size=(cfg.M, cfg.D)), name="Y")
    params = AdapterParams.initialize(cfg, rng)
    proj: Optional[GlobalTokenProjector] = None
    if cfg.uses_projector:
        proj = GlobalTokenProjector.initialize(rng, cfg.D, cfg.C)

    out_rows = cfg.M if cfg.variant is Variant.cross_attention else cfg.N
    readout = Tensor(rng.normal(size=(out_rows, cfg.output_dim)) / (out_rows * cfg.output_dim))

    def scalar(_: Tensor) -> Tensor:
        out, _ = apply_adapter(cfg, params, X, Y, global_prompt_rows(Y, cfg, proj))
        return total(mul(readout, out))

    targets = [X, Y] + [t for _, t in params.named_parameters()]
    if proj is not None:
        targets += [t for _, t in proj.named_parameters()]
    return max(grad_check(scalar, t, eps) for t in targets)


def run_gradcheck(
    seed: int, trials: int = 1, eps: float = DEFAULT_EPS, tolerance: float = TOLERANCE
) -> Dict[str, float]:
    """
    Runs the suite over `trials` derived seeds and prints one line per variant.

    Returns:
        dict: variant label -> worst relative error over all trials.
    """
    utils.print_banner(subtitle="Gradient Check")
    print(f"\n{Fore.CYAN}🧮 Central differences, eps={eps:g}, tolerance {tolerance:g}{Style.RESET_ALL}\n")

    results: Dict[str, float] = {}
    for label, cfg in suite_configs(seed):
        worst = 0.0
        for trial in range(trials):
            worst = max(worst, check_variant(cfg, utils.derive_seed(seed, trial), eps))
        results[label] = worst
        utils.status_line("ok" if worst <= tolerance else "fail", f"{label:<24}", f"max rel error {worst:.3e}")

    print(f"\n{Style.DIM}" + "─" * 50 + f"{Style.RESET_ALL}")
    return results
