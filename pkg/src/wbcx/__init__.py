"""Explainable white-blood-cell set prediction: one forward pass yields cell
class, bounding box, nucleus/cytoplasm masks, and five pathologist-style
explanations, trained with a composite matching loss and evaluated with
detection, segmentation, explanation, and faithfulness metrics."""

__version__ = "0.1.0"
