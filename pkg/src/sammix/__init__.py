"""Semi-supervised organ segmentation from class-activation box prompts.

A small CNN classifier provides class-activation maps, the maps are
thresholded into bounding-box prompts, and a LoRA-adapted promptable
segmenter turns the prompts into masks.  Everything runs at desk scale
on synthetic CT-like phantoms.
"""

__version__ = "0.1.0"
