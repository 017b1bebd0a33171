from app.cli.commands import bench, evaluate, gen, landscape, match

COMMANDS = [gen, match, evaluate, landscape, bench]
