"""核心模块：电池模型、神经网络、数据生成与功率搜索"""
