"""Package data: versioned table sidecars."""
