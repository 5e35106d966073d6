"""Audio-description narration with a frozen causal LM.

Pipeline: ingest clip features and character banks, compute character
exemplars, refine the bank to the description-related characters, assemble
an interleaved multimodal prompt, and train the visual mapping networks
against a frozen LM. Evaluation covers ROUGE-L, CIDEr, windowed retrieval
recall, and character-name IoU.
"""

__version__ = "0.1.0"
