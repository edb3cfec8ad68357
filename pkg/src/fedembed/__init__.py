"""FedEmbed: personalised, private federated learning with personal embeddings."""

__version__ = "0.1.0"
