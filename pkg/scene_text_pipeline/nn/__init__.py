"""Dense numpy layers with hand-written backward passes, the CRNN model and its optimizer."""
