"""Automatic discovery of training-time poisoning attacks on few-shot
class-incremental learners.

The package couples a typed attack-description language with a
generate-evaluate loop: candidate attack specifications are produced by a
generator (LLM-backed or a deterministic mock), scored by poisoning a
prototype-based incremental learner, and steered by a small PPO controller.
"""

__version__ = "0.1.0"
