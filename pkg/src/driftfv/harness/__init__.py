"""Test cases, reference solutions, error sweeps and the command line."""
from .cases import TestCase, builtin_case, case_names, constant_case, discretize
from .study import (ErrorRow, ErrorTable, ReferenceSolution, compute_reference, fit_order,
                    l1_error, sweep)
