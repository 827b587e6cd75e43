"""MiniDroid hierarchical agent: environment, executor policy, C-GRPO trainer and SRLR planner."""
