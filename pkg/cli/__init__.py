"""命令行层：子命令处理与图表输出"""
