"""Flow-field machinery: warping, TPS, the warping and flattening networks,
and their losses."""
from .fields import apply_flow, compose_flows, tps_flow, tps_inverse_flow, jacobian_min_det

__all__ = ["apply_flow", "compose_flows", "tps_flow", "tps_inverse_flow", "jacobian_min_det"]
