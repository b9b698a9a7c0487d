import sys
sys.path.insert(0, "tests")
from test_acceptance import _train_worker
print(_train_worker((sys.argv[1], int(sys.argv[2]))))
