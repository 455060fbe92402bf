"""SAR change detection with a siamese adaptive-fusion network."""
