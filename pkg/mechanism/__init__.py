"""
Demand-management mechanisms for energy communities.

Centralized and distributed message mechanisms, the convex program they
implement, and the dual learning algorithm that reaches their equilibria.
"""

__version__ = '1.0.0'
