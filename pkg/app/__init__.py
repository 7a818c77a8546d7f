# OrePanel: tile-level panel econometrics around mineral deposits
