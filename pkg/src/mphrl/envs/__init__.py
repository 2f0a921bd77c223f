from .maze import (DIRECTIONS, MazeLayout, MazeParams, PointMazeEnv, PointMazeState,
                   ground_truth_region, maze_step)
from .stagechain import (STAGES, StageChainEnv, StageChainParams, StageChainSpec, StageChainState,
                         scripted_action, stagechain_step)
from .tasks import (PICKPLACE_8, TaskSpec, TasksetSpec, dump_taskset, generate_maze_taskset,
                    generate_stagechain_taskset, load_taskset, make_env, maze_task, parse_taskset,
                    save_taskset, stagechain_task)
