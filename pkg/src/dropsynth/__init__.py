"""Droplet image synthesis and detection-augmentation toolkit.

Subpackages:
    data        dataset preparation, manifests, label files, image pyramids
    networks    progressively growing generator / critic
    train       adversarial training loop, gradient penalty, checkpoints
    fid         Frechet distance between image sets
    detect      IoU matching, precision/recall, AP, mAP suites
    harness     pseudo-labeling, dataset mixing ladder, experiment reports
    procedural  synthetic droplet scenes with exact box ground truth
    cli         command-line entry point
"""

__version__ = "0.1.0"
