"""Named flat-config presets, selectable with ``--preset``.

``paper`` keeps the published hyperparameters. The desk presets are the
settings the acceptance runs use on the 200-image synthetic benchmark;
their learning rates and phase lengths are ours, tuned at desk scale.
"""

PRESETS = {
    # published hyperparameters, 15 epochs split 5 ascent / 10 restore
    "paper": "",
    "desk-seg": """
        task=segmentation
        teacher_min_epochs=8
        lr=0.001
        forget_batch_size=4
        epochs=10
        schedule=ascent:3:all-adapters,restore:7:head-adapters-only:0.003
        forget_objective=ascent-composite
    """,
    "desk-cls": """
        task=classification
        teacher_epochs=30
        teacher_min_epochs=10
        lr=0.003
        forget_batch_size=4
        epochs=20
        schedule=joint:20:all-adapters
        forget_objective=entropy
    """,
}
