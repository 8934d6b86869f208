"""Speech-to-semantics pipeline on a synthetic spoken language.

Stages: corpus generation, an adversarially trained phoneme bridge, lexicon
decoding to subwords, a denoising subword LM, and fusion of acoustic and
semantic features for downstream task heads.
"""

__version__ = "0.1.0"
