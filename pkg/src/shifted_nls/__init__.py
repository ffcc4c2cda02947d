"""Shifted non-local search for space-time attention."""
from .errors import ConfigError, CoordinateError, DomainError, FormatError
from .search import (SearchConfig, SearchTape, nls_forward, paired_search,
                     shifted_nls_backward, shifted_nls_forward, shifted_nls_full, top_l)

__version__ = "0.1.0"
