# StepView adapters: raw steps to canonical monitor text
