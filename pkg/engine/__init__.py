from .tape import Tape, Tensor, constant, current_tape, no_tape, parameter
from .rng import RngStream
from .gradcheck import finite_difference_gradient, relative_error
