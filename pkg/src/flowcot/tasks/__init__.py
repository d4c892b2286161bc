"""
Synthetic reasoning tasks.

This package exposes:
- TaskInstance, TaskFamilyConfig and the TaskFamily ABC
- ModularChainTask, the reference family with filler tokens
- corpus synthesis and dataset I/O
"""
