"""Audio deepfake detection posed as audio question answering.

A small log-Mel audio encoder feeds a causal decoder LM through a chat
template; LoRA adapters on the decoder attention are fine-tuned so the model
answers "Fake" or "Real", and P(Fake) comes from the two key-token logits.
"""

__version__ = "0.1.0"
