"""Cross-modality BEV knowledge distillation at desk scale."""
