"""命令行与端到端实验"""
