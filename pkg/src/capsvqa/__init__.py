"""capsvqa: a desk-scale lab for weakly-supervised answer grounding in VQA.

Synthetic grid-world scenes with compositional questions and exact grounding
boxes, capsule-based reasoners with query-driven masking, and attention-map
grounding metrics.
"""

__version__ = "0.1.0"
