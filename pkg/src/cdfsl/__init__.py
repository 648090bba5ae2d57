"""Cross-domain few-shot video classification on synthetic motion clips.

Stages: MAE pretraining of a tiny video transformer on unlabeled source and
target clips, curriculum training of a student against an EMA teacher, and
N-way K-shot episodic evaluation with a logistic-regression probe.
"""

__version__ = "0.1.0"
