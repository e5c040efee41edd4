"""Desk-scale laboratory for adversarial attacks on cascaded voice biometrics.

The pipeline under study is a spoofing countermeasure (presentation attack
detection, PAD) in front of an automatic speaker verification stage (ASV);
an utterance is accepted only when both stages accept. The package provides
a synthetic audio corpus, log-power STFT features, small trainable victim
models, white-box and black-box attacks on the cascade, and the joint metric
stack (EER, joint EER, minimum normalized tandem cost).
"""

__version__ = "0.1.0"
