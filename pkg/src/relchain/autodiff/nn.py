"""Parameter containers and initialisers."""

from __future__ import annotations

import numpy as np

from relchain.autodiff.tensor import Parameter


def fan_in(shape: tuple[int, ...]) -> int:
    return shape[-2] if len(shape) >= 2 else shape[0]


class Module:
    """Owns named parameters; names are unique within a model."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._params: dict[str, Parameter] = {}

    def param(self, name: str, shape, init: str = "uniform", value: float | None = None) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            bound = 1.0 / np.sqrt(fan_in(shape))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "constant":
            data = np.full(shape, float(value))
        else:
            raise ValueError(f"unknown initializer {init!r}")
        p = Parameter(data, name=name, init=init)
        self._params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self._params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64, copy=True)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()
