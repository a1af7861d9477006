import functools

from pfc_flyback.analysis import aggregate_metrics
from pfc_flyback.sim import ControlParams, reference_circuit, run_simulation


@functools.lru_cache(maxsize=None)
def reference_run(v_line: float, i_load: float):
    """Closed-loop run of the reference board with default control, cached per session."""
    trace = run_simulation(reference_circuit(v_line), ControlParams(), i_load)
    return trace, aggregate_metrics(trace, v_line, i_load)
