"""Quota-based multi-level consistency for replicated cloudlet stores.

Objects are Eventual (last writer wins, replicated in the background) or
Strong (updates consume pre-allocated quota, borrowed between peers when a
local account runs dry). ``dcaas.harness`` runs experiments on a
deterministic simulated network; ``dcaas.cli`` wraps it.
"""

__version__ = "0.1.0"
