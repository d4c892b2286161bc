"""
Conditional sequence models (the prior and posterior policies).

This package exposes:
- Vocabulary, State, Trajectory and the CondSeqModel ABC
- TabularPolicy and LinearSoftmaxPolicy backends
- fit_mle and the PolicyFactory (creation and checkpoints)
"""
