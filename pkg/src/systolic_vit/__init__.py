"""Low-bit systolic-array model of integerized ViT self-attention."""
