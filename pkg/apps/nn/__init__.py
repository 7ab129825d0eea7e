# Dense-network math: layers, reverse-mode gradients, Adam
