"""Routing with zero-computation experts, bias control and balance monitors."""
from .balance import LBLossConfig, lb_loss, group_frequencies, balance_gradient
from .controller import simulate_controller, GaussianLogits, ControllerTrace
from .monitors import router_similarity, grad_norm_ratio, grad_norm_ratio_from_grads, RgTracker
from .router import RouterState, RoutingDecision, route_topk, select_experts, bias_update, validate_router_dims

__all__ = ['RouterState', 'RoutingDecision', 'route_topk', 'select_experts', 'bias_update',
           'validate_router_dims', 'LBLossConfig', 'lb_loss', 'group_frequencies', 'balance_gradient',
           'simulate_controller', 'GaussianLogits', 'ControllerTrace', 'router_similarity',
           'grad_norm_ratio', 'grad_norm_ratio_from_grads', 'RgTracker']
