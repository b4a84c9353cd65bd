"""Learn-explain-reinforce toolkit."""
