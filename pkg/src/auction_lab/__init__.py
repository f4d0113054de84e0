"""Learning approximately truthful revenue-maximizing auctions."""
