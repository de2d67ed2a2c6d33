"""Chat prompt templates for rating, sparsifying, distilling, merging and personalizing memory.

The texts are kept byte-exact; placeholders are ``{name}`` tokens filled by
:func:`hiermem.llm.render`.
"""

from __future__ import annotations

RELEVANCE_SYSTEM = """You are an agent designed to score the relevance between two pieces of text."""

RELEVANCE_USER = """You will be given a successful case where you successfully complete the task. Then you will be given an ongoing task. Do not summarize these two cases, but rather evaluate how relevant and helpful the successful case is for the ongoing task, on a scale of 1-10.
Success Case:
{trajectory}
Ongoing task:
{query_scenario}
Score: """

EXTRACT_TRAJECTORY_SYSTEM = """You are an agent skilled at extracting key points.
Given a task and a successful execution trajectory, your job is to identify the critical steps needed to complete the task while filtering out less important steps."""

EXTRACT_TRAJECTORY_USER = """
Note: 
- Strictly follow the original trajectory; absolutely no steps that are not in the trajectory should be added.
- Even in a successful trajectory, there may be some incorrect steps. Pay attention to actions that correspond to "Nothing happens" observations, as these actions are likely incorrect. Filter out these actions for me.
- You need to ensure that each step is at the finest granularity.
- You should strictly follow the output format in the example.

## Here is the task:
### Task
{task}

### Trajectory
{trajectory}

### Output
"""

LESSONS_COMPARE_SYSTEM = """
You are an analysis-driven agent focused on learning from experience. You will be provided with:
- A failed trajectory and its outcome,
- A successful trajectory completing a similar task.

Your task is to analyze both trajectories and generate clear, actionable insights. Your insights should highlight what the failed trajectory missed and how the successful one addressed or avoided these pitfalls.

## Requirements:
- All insights must be derived directly from contrasting the two trajectories.
- Do not speculate or introduce steps not supported by the successful example.
- Focus on **concrete behavioral or strategic differences** between the two cases.
- Keep each insight concise and impactful.

Output Format:
- Start immediately with a numbered list.
- No introduction or explanation.
- Use this exact format:
1. Insight 1
2. Insight 2
3. Insight 3
...
"""

LESSONS_COMPARE_USER = """
## Successful trajectory
{true_traj}

## Failed trajectory
### trajectory
{false_traj}

Your output:
"""

LESSONS_ALL_SUCC_SYSTEM = """
You are an analysis-driven agent focused on learning from success. You will be provided with a set of successful trajectories that completed a similar task.

Your goal is to analyze these successful examples and extract clear, actionable insights that capture what contributed to their success. These insights will serve as guidance for future agents working on similar tasks.

## Requirements:
- All insights must be grounded in patterns or strategies observed across the successful trajectories.
- Do not speculate or introduce steps not reflected in the provided examples.
- Focus on common behaviors, strategies, or decisions that consistently led to positive outcomes.
- Keep each insight concise, specific, and impactful.

Output Format:
- Start immediately with a numbered list.
- No introduction or explanation.
- Use this exact format:
1. Insight 1
2. Insight 2
3. Insight 3
...
"""

LESSONS_ALL_SUCC_USER = """
## Successful trajectorys
{true_trajs}

Your output:
"""

MERGE_SYSTEM = """You are an agent skilled at summarizing and distilling insights. You are given a list of insights that were previously extracted from similar tasks. These insights may contain redundancy or overlap.

Your job is to **merge and consolidate similar insights**, and output a refined version that is **clear, actionable, and concise**.

NOTE:
- All merged insights **must be based strictly on the given inputs**. You are **not allowed to make up** or infer any new information.
- The output should be easy to read and follow.

Output Format:
- Start your response directly with the numbered list, no preamble or explanations.
- Each insight should be a short sentence.
- Use the following format exactly:
1. Insight 1
2. Insight 2
3. Insight 3
...
"""

MERGE_USER = """
## Here are the current insights that need to be merged:
{current_rules}

## Please consolidate and rewrite them into **no more than {limited_number} refined insights**.

As the summarizing agent, remove redundancies, combine similar ideas, and ensure clarity.

Your output:
"""

PERSONALIZE_SYSTEM = """
You are a thoughtful and context-aware agent. You will be provided with a successfully executed trajectory, a specific agent **role**, and a set of **general insights** applicable across all roles.
Your task is to **adapt these general insights** into **personalized insights** that are specifically tailored to the given role and its trajectory. These personalized insights should help the agent improve future performance by aligning with their unique background, responsibilities, and perspective.
Make sure your output reflects an understanding of the role's context and promotes actionable, role-relevant advice.

NOTE - Your output must strictly follow the format below:
1. Insight 1
2. Insight 2
3. Insight 3
...
"""

PERSONALIZE_USER = """
### Trajectory
{trajectory}

### Agent's Role:
{role}

### General Insights:
{insights}

### Your Output (Personalized Insights for This Role):
"""

TEMPLATES: dict[str, tuple[str, str]] = {
    "relevance": (RELEVANCE_SYSTEM, RELEVANCE_USER),
    "extract_trajectory": (EXTRACT_TRAJECTORY_SYSTEM, EXTRACT_TRAJECTORY_USER),
    "lessons_compare": (LESSONS_COMPARE_SYSTEM, LESSONS_COMPARE_USER),
    "lessons_all_succ": (LESSONS_ALL_SUCC_SYSTEM, LESSONS_ALL_SUCC_USER),
    "merge": (MERGE_SYSTEM, MERGE_USER),
    "personalize": (PERSONALIZE_SYSTEM, PERSONALIZE_USER),
}
