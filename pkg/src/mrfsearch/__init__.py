"""MRF-based architecture search with self-training domain adaptation,
at desk scale: a pairwise-MRF search engine with differentiable factor
learning and diverse M-best inference, a slimmable toy U-Net supernet on a
minimal autodiff engine, and a teacher-student pseudo-labelling loop over
synthetic domain-shifted segmentation data."""

__version__ = "0.1.0"
