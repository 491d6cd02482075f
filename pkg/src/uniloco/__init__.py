"""Terrain-curriculum locomotion pipeline on a deterministic planar biped.

Subsystems:
    terrain   procedural benchmark terrains, curriculum sampling, egocentric scan
    sim       planar legged robot with PD control and penalty contact
    nn        dense tensors, reverse-mode gradients, Adam, layer zoo
    rewards   per-term reward evaluation for specialist training
    ppo       GAE + clipped-surrogate PPO and the specialist trainer
    dataset   binary skill dataset (record / persist / window sampling)
    diffusion autoregressive terrain-conditioned trajectory diffusion planner
    unified   goal + adversarial-style rewards and the unified policy trainer
    cli       subcommands, config parsing, evaluation and scaling studies
"""

__version__ = "0.1.0"
