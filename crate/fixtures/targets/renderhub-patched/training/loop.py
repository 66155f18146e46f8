JOBS = []


def queue_length():
    return len(JOBS)


def train_step(batch):
    JOBS.append(batch)
    return len(batch)
