"""
命令行命令与分类图渲染
"""
