"""Energy-aware per-request model selection with accuracy SLAs."""
