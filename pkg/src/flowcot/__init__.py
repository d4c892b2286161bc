"""
flowcot: token-level flow velocity, greedy flow decoding and flow-reward RL
over exactly enumerable sequence models.

Entry point:
    flowcot --help
"""
