"""
Testes do DEGM Lab
"""
