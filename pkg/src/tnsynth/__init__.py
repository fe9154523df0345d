"""Structure search for tree tensor networks by split-program synthesis."""

from tnsynth.dsl import (
    ExecState,
    Expr,
    Hole,
    Program,
    exec_osplit,
    exec_program,
    format_program,
    parse_program,
    sketch,
)
from tnsynth.errors import (
    ExecutionFailure,
    InvalidArgument,
    InvalidState,
    ShapeMismatch,
    UnsupportedOrder,
)
from tnsynth.network import Partition, TensorNetwork, contract_all, relative_error
from tnsynth.search import (
    SearchConfig,
    SearchResult,
    decompose_with_topology,
    generate_synthetic,
    ht_baseline,
    search_structure,
    tt_baseline,
)
from tnsynth.tensor import Index, Tensor

__version__ = "0.1.0"

__all__ = [
    "ExecState", "Expr", "Hole", "Program", "exec_osplit", "exec_program",
    "format_program", "parse_program", "sketch", "ExecutionFailure",
    "InvalidArgument", "InvalidState", "ShapeMismatch", "UnsupportedOrder",
    "Partition", "TensorNetwork", "contract_all", "relative_error",
    "SearchConfig", "SearchResult", "decompose_with_topology",
    "generate_synthetic", "ht_baseline", "search_structure", "tt_baseline",
    "Index", "Tensor",
]
