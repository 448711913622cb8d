"""
Parameter market simulator.

Agents train local models, a trusted broker evaluates prospective merges on
held-out data, and settlements follow a Nash-bargaining price rule.
"""

__version__ = "0.1.0"
