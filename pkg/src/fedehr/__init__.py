"""fedehr: desk-scale federated learning over text-linearized EHR events.

Subpackages cover synthetic multi-client data generation, event
linearization, a compact hierarchical patient encoder with exact gradients,
four federated aggregation algorithms, differentially private participant
selection, evaluation metrics, and the host cost-savings model.
"""

__version__ = "0.1.0"
