# makes oracles.py importable from every test module
