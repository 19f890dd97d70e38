"""Joint image manipulation localization at desk scale."""
