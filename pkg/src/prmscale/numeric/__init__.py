from .autodiff import (
    EPS_NORM,
    Var,
    backward,
    no_grad,
    numerical_grad,
    relative_error,
    unit_normalize,
)
from .params import Adam, ParamStore, trunc_normal
from .rng import RngStream, as_generator, gaussian_vector

__all__ = [
    "EPS_NORM",
    "Adam",
    "ParamStore",
    "RngStream",
    "Var",
    "as_generator",
    "backward",
    "gaussian_vector",
    "no_grad",
    "numerical_grad",
    "relative_error",
    "trunc_normal",
    "unit_normalize",
]
