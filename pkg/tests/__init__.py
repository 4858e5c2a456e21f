"""
Pacote de testes do MamoRede
"""
