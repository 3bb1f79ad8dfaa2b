# Registry queries
