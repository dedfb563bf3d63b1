"""Block coordinate descent training for deep networks, with an SGD baseline."""
