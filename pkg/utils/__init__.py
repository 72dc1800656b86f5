"""
通用基础设施：错误处理、性能监控、并行任务池、攻击阶段管理与产物读写
"""
